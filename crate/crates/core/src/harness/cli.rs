//! Command-line front end. Every command reads the JSON config given by
//! `--config` (defaults otherwise) and validates it before doing any work.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::image::{encode_png, read_png, write_png};
use crate::mask_curriculum::{schedule_trace, trace_csv};
use crate::params::{count_params, ParamStore};
use crate::prompts::{annotate_batch, backend_for, build_request, synthetic_caption, ImageRef, SceneSpec, DEFAULT_INSTRUCTION};
use crate::psi_dit::Arch;

use super::ablation::run_ablation;
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{AblationAxis, ExperimentConfig};
use super::pipeline;

#[derive(Parser, Debug)]
#[command(name = "tripleflow", version, about = "Triple-flow diffusion transformer for toy blind super-resolution")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the ablation seed list).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long, global = true, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Arch,
    Init,
    Mask,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural corpus (PNG pairs and manifest) to --out.
    GenData,
    /// Train the base caption-only; writes base.ckpt and pretrain_log.jsonl.
    Pretrain,
    /// MimSR then SFT from the base in --ckpt; writes model.ckpt and train_log.jsonl.
    Train,
    /// Super-resolve held-out scenes, or one --input image, with the model in --ckpt.
    Sample {
        /// LR PNG to super-resolve instead of the held-out split.
        #[arg(long, value_name = "PNG")]
        input: Option<PathBuf>,
        /// Caption for --input, e.g. "red circle on dark at center".
        #[arg(long)]
        caption: Option<String>,
    },
    /// Score the model in --ckpt on the held-out split against bicubic.
    Eval,
    /// Run the ablation grid; --ckpt optionally supplies a shared base.
    Ablate {
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
    },
    /// Write the mask schedule trace as CSV (to --out/schedule.csv or stdout).
    ScheduleDump {
        /// Monte-Carlo draws per step for the mean column.
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
    },
    /// Annotate held-out LR images through the configured backend.
    Annotate {
        /// In-context examples taken from the training split.
        #[arg(long, default_value_t = 0)]
        examples: usize,
    },
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("`{cmd}` requires {flag}")))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.ablation.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `path` and checks its tensors fit `cfg.model`.
fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<ParamStore> {
    let params = load_checkpoint(path)?;
    let w = params.tensor(crate::psi_dit::names::PATCH_W)?;
    let expect = [cfg.model.token_width(), cfg.model.width];
    if w.shape() != expect {
        return Err(Error::Config(format!(
            "checkpoint patch embedding is {:?}, config expects {:?}",
            w.shape(),
            expect
        )));
    }
    Ok(params)
}

fn parse_caption(text: &str) -> Result<Vec<u32>> {
    let w: Vec<&str> = text.split_whitespace().collect();
    match w.as_slice() {
        [color, shape, "on", bg, "at", pos] => Ok(synthetic_caption(&SceneSpec::from_words(shape, color, bg, pos)?)),
        _ => Err(Error::Invalid(format!("caption `{text}` is not `<color> <shape> on <background> at <position>`"))),
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match &cli.command {
        Command::GenData => {
            let dir = need(&cli.out, "--out", "gen-data")?;
            let corpus = pipeline::corpus(&cfg)?;
            corpus.write(dir)?;
            write(&dir.join("config.json"), &cfg.to_json())?;
            say(out, format!("wrote {} train + {} held-out scenes to {}", corpus.train.len(), corpus.held_out.len(), dir.display()));
        }
        Command::Pretrain => {
            let dir = need(&cli.out, "--out", "pretrain")?;
            mkdir(dir)?;
            let corpus = pipeline::corpus(&cfg)?;
            let data = pipeline::train_data(&corpus, &cfg)?;
            let (base, state) = pipeline::pretrain(&cfg, &data)?;
            save_checkpoint(&base, &dir.join("base.ckpt"))?;
            write(&dir.join("pretrain_log.jsonl"), &state.log_jsonl())?;
            say(out, format!("pretrained {} steps; base has {} parameters", state.step, count_params(&base, false)));
        }
        Command::Train => {
            let ckpt = need(&cli.ckpt, "--ckpt (base checkpoint)", "train")?;
            let dir = need(&cli.out, "--out", "train")?;
            let base = load_model(ckpt, &cfg)?;
            if pipeline::detect_arch(&base) != Arch::Base {
                return Err(Error::Config("`train` expects a base checkpoint without an SR branch".into()));
            }
            mkdir(dir)?;
            let corpus = pipeline::corpus(&cfg)?;
            let data = pipeline::train_data(&corpus, &cfg)?;
            let mut params = pipeline::attach_branch(&base, &cfg)?;
            let state = pipeline::train_sr(&cfg, &data, &mut params)?;
            save_checkpoint(&params, &dir.join("model.ckpt"))?;
            write(&dir.join("train_log.jsonl"), &state.log_jsonl())?;
            say(
                out,
                format!("trained {} SR steps ({}); {} trainable parameters", state.step - cfg.train.pretrain_steps, cfg.arch.as_str(), count_params(&params, true)),
            );
        }
        Command::Sample { input, caption } => {
            let ckpt = need(&cli.ckpt, "--ckpt", "sample")?;
            let dir = need(&cli.out, "--out", "sample")?;
            let params = load_model(ckpt, &cfg)?;
            mkdir(dir)?;
            if let Some(path) = input {
                let lr = read_png(path)?;
                let ids = match caption {
                    Some(c) => parse_caption(c)?,
                    None => crate::prompts::empty_caption(),
                };
                let arch = pipeline::detect_arch(&params);
                let sr = crate::diffusion::sample(&cfg.model, &[&params], arch, &lr, &ids, cfg.train.sample_steps, cfg.seed)?;
                write_png(&dir.join("sr.png"), &sr)?;
                say(out, format!("wrote {}", dir.join("sr.png").display()));
            } else {
                let corpus = pipeline::corpus(&cfg)?;
                let scenes = pipeline::held_out(&cfg, &corpus);
                let sr = pipeline::super_resolve(&cfg, &params, &scenes)?;
                for (s, img) in scenes.iter().zip(&sr) {
                    write_png(&dir.join(format!("{}.png", s.id())), img)?;
                }
                say(out, format!("wrote {} SR images to {}", sr.len(), dir.display()));
            }
        }
        Command::Eval => {
            let ckpt = need(&cli.ckpt, "--ckpt", "eval")?;
            let params = load_model(ckpt, &cfg)?;
            let corpus = pipeline::corpus(&cfg)?;
            let report = pipeline::evaluate(&cfg, &params, &corpus)?;
            if let Some(dir) = &cli.out {
                mkdir(dir)?;
                write(&dir.join("report.csv"), &report.to_csv())?;
                write(&dir.join("summary.txt"), &report.summary())?;
            }
            let _ = write!(out, "{}", report.summary());
        }
        Command::Ablate { axis } => {
            let dir = need(&cli.out, "--out", "ablate")?;
            let mut cfg = cfg.clone();
            match axis {
                Some(AxisArg::Arch) => cfg.ablation.axes = vec![AblationAxis::Arch],
                Some(AxisArg::Init) => cfg.ablation.axes = vec![AblationAxis::Init],
                Some(AxisArg::Mask) => cfg.ablation.axes = vec![AblationAxis::Mask],
                Some(AxisArg::All) => cfg.ablation.axes = vec![AblationAxis::Arch, AblationAxis::Init, AblationAxis::Mask],
                None => {}
            }
            let base = match &cli.ckpt {
                Some(p) => Some(load_model(p, &cfg)?),
                None => None,
            };
            let report = run_ablation(&cfg, base.as_ref())?;
            mkdir(dir)?;
            write(&dir.join("ablation.csv"), &report.to_csv())?;
            write(&dir.join("ablation_curves.csv"), &report.curves_csv())?;
            write(&dir.join("ablation_notes.txt"), &report.notes())?;
            let _ = write!(out, "{}", report.to_csv());
            let _ = write!(out, "{}", report.notes());
        }
        Command::ScheduleDump { draws } => {
            let csv = trace_csv(&schedule_trace(&cfg.schedule, *draws, cfg.seed)?);
            match &cli.out {
                Some(dir) => {
                    mkdir(dir)?;
                    write(&dir.join("schedule.csv"), &csv)?;
                    say(out, format!("wrote {}", dir.join("schedule.csv").display()));
                }
                None => {
                    let _ = write!(out, "{csv}");
                }
            }
        }
        Command::Annotate { examples } => {
            let dir = need(&cli.out, "--out", "annotate")?;
            let corpus = pipeline::corpus(&cfg)?;
            let ex: Vec<(ImageRef, String)> = corpus
                .train
                .iter()
                .take(*examples)
                .map(|s| Ok((ImageRef::inline_png(&encode_png(&s.lr)?), s.spec.text())))
                .collect::<Result<_>>()?;
            let scenes = pipeline::held_out(&cfg, &corpus);
            let requests: Vec<_> = scenes
                .iter()
                .map(|s| Ok(build_request(ImageRef::inline_png(&encode_png(&s.lr)?), &ex, DEFAULT_INSTRUCTION)))
                .collect::<Result<_>>()?;
            let backend = backend_for(&cfg.annotate.endpoint);
            let results = annotate_batch(backend.as_ref(), &requests, cfg.annotate.concurrency);
            let mut jsonl = String::new();
            let mut failed = 0;
            for (s, r) in scenes.iter().zip(results) {
                let line = match r {
                    Ok(p) => serde_json::json!({ "id": s.id(), "prompt": p }),
                    Err(e) => {
                        failed += 1;
                        serde_json::json!({ "id": s.id(), "error": e.to_string() })
                    }
                };
                jsonl.push_str(&line.to_string());
                jsonl.push('\n');
            }
            mkdir(dir)?;
            write(&dir.join("prompts.jsonl"), &jsonl)?;
            say(out, format!("annotated {} images ({failed} failed)", scenes.len()));
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} annotation requests failed")));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a validation or run failure, 2 on
/// a usage error.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

//! The three-phase run: pretrain the base, attach the SR branch, MimSR, SFT,
//! then evaluate on the held-out split.

use crate::diffusion::{sample_batch, Phase, TrainData, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::metrics::{eval_report, EvalItem, EvalReport};
use crate::params::ParamStore;
use crate::psi_dit::{init_base, init_controlnet, init_sscm_from_base, Arch};

use super::config::{ArchTag, ExperimentConfig};
use super::dataset::{self, Corpus, Scene};

pub fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    dataset::generate(cfg.corpus.n_train, cfg.corpus.n_held_out, cfg.model.image_size, &cfg.degradation, cfg.seed)
}

pub fn train_data(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<TrainData> {
    TrainData::new(
        corpus.train.iter().map(|s| s.hr.clone()).collect(),
        corpus.train.iter().map(Scene::caption).collect(),
        cfg.model.patch,
    )
}

fn trainer<'a>(cfg: &'a ExperimentConfig, data: &'a TrainData) -> Trainer<'a> {
    Trainer {
        model: &cfg.model,
        train: &cfg.train,
        schedule: &cfg.schedule,
        degradation: &cfg.degradation,
        data,
        arch: cfg.arch.arch(),
        seed: cfg.seed,
    }
}

/// Fresh base trained caption-only for `train.pretrain_steps`.
pub fn pretrain(cfg: &ExperimentConfig, data: &TrainData) -> Result<(ParamStore, TrainState)> {
    let mut params = init_base(&cfg.model, cfg.seed)?;
    let mut state = TrainState::new(Phase::PretrainT2I, &cfg.train);
    trainer(cfg, data).run_phase(&mut state, &mut params, Phase::PretrainT2I, cfg.train.pretrain_steps)?;
    Ok((params, state))
}

/// Base plus the configured SR branch.
pub fn attach_branch(base: &ParamStore, cfg: &ExperimentConfig) -> Result<ParamStore> {
    let mut params = base.clone();
    let branch = match cfg.arch {
        ArchTag::PsiDit => init_sscm_from_base(base, &cfg.model, cfg.seed)?,
        ArchTag::Controlnet => init_controlnet(base, &cfg.model, cfg.seed)?,
    };
    params.extend(branch)?;
    Ok(params)
}

/// MimSR then SFT on `params` (base + branch). Global steps continue after
/// the pretraining budget, so a split pretrain/train run matches one call of
/// [`run`].
pub fn train_sr(cfg: &ExperimentConfig, data: &TrainData, params: &mut ParamStore) -> Result<TrainState> {
    let mut state = TrainState::new(Phase::MimSR, &cfg.train);
    state.step = cfg.train.pretrain_steps;
    let t = trainer(cfg, data);
    t.run_phase(&mut state, params, Phase::MimSR, cfg.mim_steps())?;
    t.run_phase(&mut state, params, Phase::SftSR, cfg.train.sft_steps)?;
    Ok(state)
}

/// The architecture a parameter set was trained for.
pub fn detect_arch(params: &ParamStore) -> Arch {
    if params.names().any(|n| n.starts_with("sscm.")) {
        Arch::PsiDit
    } else if params.names().any(|n| n.starts_with("ctrl.")) {
        Arch::ControlNet
    } else {
        Arch::Base
    }
}

/// Samples SR images for `scenes`, batched; the noise for scene `i` is keyed
/// by its global index, so results do not depend on batch size.
pub fn super_resolve(cfg: &ExperimentConfig, params: &ParamStore, scenes: &[&Scene]) -> Result<Vec<ImageGrid>> {
    let arch = detect_arch(params);
    if arch == Arch::Base {
        return Err(Error::MissingParam("SR branch (sscm.* or ctrl.*)".into()));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.eval.batch_size) {
        let lrs: Vec<&ImageGrid> = chunk.iter().map(|s| &s.lr).collect();
        let caps: Vec<Vec<u32>> = chunk.iter().map(|s| s.caption()).collect();
        let keys: Vec<u64> = chunk.iter().map(|s| s.index).collect();
        out.extend(sample_batch(&cfg.model, &[params], arch, &lrs, &caps, &keys, cfg.train.sample_steps, cfg.seed)?);
    }
    Ok(out)
}

pub fn held_out<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus) -> Vec<&'a Scene> {
    let n = cfg.eval.max_images.unwrap_or(usize::MAX).min(corpus.held_out.len());
    corpus.held_out[..n].iter().collect()
}

pub fn evaluate(cfg: &ExperimentConfig, params: &ParamStore, corpus: &Corpus) -> Result<EvalReport> {
    let scenes = held_out(cfg, corpus);
    let sr = super_resolve(cfg, params, &scenes)?;
    let items = scenes.iter().map(|s| EvalItem { id: s.id(), hr: &s.hr, lr: &s.lr });
    let mut outputs = sr.into_iter();
    eval_report(items, cfg.eval.crop, &cfg.digest(), |_| {
        outputs.next().ok_or_else(|| Error::Invalid("fewer SR outputs than items".into()))
    })
}

pub struct RunOutput {
    pub base: ParamStore,
    pub params: ParamStore,
    pub pretrain_state: TrainState,
    pub sr_state: TrainState,
    pub report: EvalReport,
}

impl RunOutput {
    pub fn log_jsonl(&self) -> String {
        self.pretrain_state.log_jsonl() + &self.sr_state.log_jsonl()
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let corpus = corpus(cfg)?;
    let data = train_data(&corpus, cfg)?;
    let (base, pretrain_state) = pretrain(cfg, &data)?;
    let mut params = attach_branch(&base, cfg)?;
    let sr_state = train_sr(cfg, &data, &mut params)?;
    let report = evaluate(cfg, &params, &corpus)?;
    Ok(RunOutput { base, params, pretrain_state, sr_state, report })
}

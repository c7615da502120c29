//! Ablation runner over the architecture, init-policy and mask-strategy axes.
//!
//! Every arm of an axis starts from the same pretrained base for a given
//! seed and runs the same MimSR + SFT budget. Convergence is measured as the
//! number of SR steps until the trailing-window median loss first drops to
//! the reference arm's final-window median (the ControlNet baseline on the
//! architecture axis, the default Ψ-DiT arm elsewhere).

use std::fmt::Write as _;

use crate::diffusion::Phase;
use crate::error::Result;
use crate::mask_curriculum::MaskStrategy;
use crate::params::{count_params, ParamStore};
use crate::psi_dit::InitPolicy;

use super::config::{AblationAxis, ArchTag, ExperimentConfig};
use super::pipeline;

#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub cfg: ExperimentConfig,
    /// Sets the convergence threshold for its axis.
    pub reference: bool,
}

fn arm(label: impl Into<String>, cfg: ExperimentConfig, reference: bool) -> Arm {
    Arm { label: label.into(), cfg, reference }
}

pub fn arms(base: &ExperimentConfig, axis: AblationAxis) -> Vec<Arm> {
    let psi = ExperimentConfig {
        arch: ArchTag::PsiDit,
        model: crate::psi_dit::PsiDitConfig {
            enable_zero_init: true,
            sscm_init_policy: InitPolicy::NlbCopy,
            ..base.model.clone()
        },
        schedule: crate::mask_curriculum::MaskScheduleParams { strategy: MaskStrategy::Pms, ..base.schedule.clone() },
        ..base.clone()
    };
    match axis {
        AblationAxis::Arch => vec![
            arm("psi_dit", psi.clone(), false),
            arm("controlnet", ExperimentConfig { arch: ArchTag::Controlnet, ..psi }, true),
        ],
        AblationAxis::Init => {
            let mut v = Vec::new();
            for zero in [true, false] {
                for policy in [InitPolicy::Random, InitPolicy::TebCopy, InitPolicy::NlbCopy] {
                    let mut c = psi.clone();
                    c.model.enable_zero_init = zero;
                    c.model.sscm_init_policy = policy;
                    let label = format!("{}{}", policy.as_str(), if zero { "+zero_init" } else { "" });
                    v.push(arm(label, c, zero && policy == InitPolicy::NlbCopy));
                }
            }
            v
        }
        AblationAxis::Mask => [
            MaskStrategy::None,
            MaskStrategy::Fixed { ratio: 0.5 },
            MaskStrategy::Fixed { ratio: 0.75 },
            MaskStrategy::Uniform { lo: 0.75, hi: 1.0 },
            MaskStrategy::Pms,
        ]
        .into_iter()
        .map(|s| {
            let mut c = psi.clone();
            c.schedule.strategy = s;
            arm(s.label(), c, s == MaskStrategy::Pms)
        })
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub arm: String,
    pub seed: u64,
    pub arch: ArchTag,
    pub init_policy: InitPolicy,
    pub zero_init: bool,
    pub mask: String,
    pub trainable_params: usize,
    /// Median SR loss over the final window.
    pub final_loss: f64,
    pub threshold: f64,
    pub steps_to_threshold: Option<u64>,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    /// SR-phase losses in step order.
    pub curve: Vec<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the last `window` entries (all of them if shorter).
pub fn final_window_median(curve: &[f64], window: usize) -> f64 {
    median(&curve[curve.len().saturating_sub(window)..])
}

/// First step count `s` at which the median of `curve[s−w..s]` is at most
/// `threshold`, with `w = min(window, len)`.
pub fn steps_to_threshold(curve: &[f64], window: usize, threshold: f64) -> Option<u64> {
    let w = window.min(curve.len()).max(1);
    (w..=curve.len()).find(|&s| median(&curve[s - w..s]) <= threshold).map(|s| s as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config_digest: String,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "axis,arm,seed,arch,init_policy,zero_init,mask,trainable_params,final_loss,threshold,steps_to_threshold,psnr,ssim,bicubic_psnr,bicubic_ssim\n",
        );
        for r in &self.rows {
            let steps = r.steps_to_threshold.map_or_else(|| "none".to_string(), |s| s.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{},{:.4},{:.4},{:.4},{:.4}",
                r.axis.as_str(),
                r.arm,
                r.seed,
                r.arch.as_str(),
                r.init_policy.as_str(),
                r.zero_init,
                r.mask,
                r.trainable_params,
                r.final_loss,
                r.threshold,
                steps,
                r.psnr,
                r.ssim,
                r.bicubic_psnr,
                r.bicubic_ssim,
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("axis,arm,seed,sr_step,loss\n");
        for r in &self.rows {
            for (i, l) in r.curve.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{:.6}", r.axis.as_str(), r.arm, r.seed, i, l);
            }
        }
        s
    }

    fn find(&self, axis: AblationAxis, arm: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.axis == axis && r.arm == arm && r.seed == seed)
    }

    /// Expected-trend notes. The Ψ-DiT convergence advantage (30k against
    /// 80k iterations at full scale) is recorded, never enforced.
    pub fn notes(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", self.config_digest);
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        for seed in seeds {
            let (Some(p), Some(c)) =
                (self.find(AblationAxis::Arch, "psi_dit", seed), self.find(AblationAxis::Arch, "controlnet", seed))
            else {
                continue;
            };
            let ratio = p.trainable_params as f64 / c.trainable_params as f64;
            let _ = writeln!(
                s,
                "seed {seed}: trainable psi_dit {} vs controlnet {} (ratio {ratio:.4})",
                p.trainable_params, c.trainable_params
            );
            let fmt = |x: Option<u64>| x.map_or_else(|| "not reached".to_string(), |v| v.to_string());
            let observed = match (p.steps_to_threshold, c.steps_to_threshold) {
                (Some(a), Some(b)) if a < b => "matches",
                (Some(_), None) => "matches",
                _ => "does not match",
            };
            let _ = writeln!(
                s,
                "seed {seed}: steps to threshold {:.6}: psi_dit {} vs controlnet {}; expected trend psi_dit faster, observed {observed}",
                c.threshold,
                fmt(p.steps_to_threshold),
                fmt(c.steps_to_threshold)
            );
        }
        s
    }
}

/// Runs every configured axis for every seed. `base` replaces per-seed
/// pretraining when given.
pub fn run_ablation(cfg: &ExperimentConfig, base: Option<&ParamStore>) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let seeded = ExperimentConfig { seed, ..cfg.clone() };
        let corpus = pipeline::corpus(&seeded)?;
        let data = pipeline::train_data(&corpus, &seeded)?;
        let pretrained;
        let base = match base {
            Some(b) => b,
            None => {
                pretrained = pipeline::pretrain(&seeded, &data)?.0;
                &pretrained
            }
        };
        for &axis in &cfg.ablation.axes {
            let mut axis_rows = Vec::new();
            let mut threshold = f64::NAN;
            for a in arms(&seeded, axis) {
                let mut params = pipeline::attach_branch(base, &a.cfg)?;
                let state = pipeline::train_sr(&a.cfg, &data, &mut params)?;
                let mut curve = state.losses(Phase::MimSR);
                curve.extend(state.losses(Phase::SftSR));
                let final_loss = final_window_median(&curve, cfg.ablation.loss_window);
                if a.reference {
                    threshold = final_loss;
                }
                let report = pipeline::evaluate(&a.cfg, &params, &corpus)?;
                axis_rows.push(AblationRow {
                    axis,
                    arm: a.label,
                    seed,
                    arch: a.cfg.arch,
                    init_policy: a.cfg.model.sscm_init_policy,
                    zero_init: a.cfg.model.enable_zero_init,
                    mask: a.cfg.schedule.strategy.label(),
                    trainable_params: count_params(&params, true),
                    final_loss,
                    threshold: f64::NAN,
                    steps_to_threshold: None,
                    psnr: report.mean_psnr,
                    ssim: report.mean_ssim,
                    bicubic_psnr: report.bicubic_psnr,
                    bicubic_ssim: report.bicubic_ssim,
                    curve,
                });
            }
            for r in &mut axis_rows {
                r.threshold = threshold;
                r.steps_to_threshold = steps_to_threshold(&r.curve, cfg.ablation.loss_window, threshold);
            }
            rows.extend(axis_rows);
        }
    }
    Ok(AblationReport { rows, config_digest: cfg.digest() })
}

//! Experiment configuration (JSON, unknown keys rejected).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::DegradationConfig;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::mask_curriculum::MaskScheduleParams;
use crate::prompts::{DEFAULT_CONCURRENCY, VOCAB_USED};
use crate::psi_dit::{Arch, PsiDitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    PsiDit,
    Controlnet,
}

impl ArchTag {
    pub fn arch(self) -> Arch {
        match self {
            ArchTag::PsiDit => Arch::PsiDit,
            ArchTag::Controlnet => Arch::ControlNet,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchTag::PsiDit => "psi_dit",
            ArchTag::Controlnet => "controlnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_held_out: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_held_out: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Side of the central crop scored by PSNR/SSIM.
    pub crop: usize,
    /// Evaluate only the first N held-out scenes; `null` means all.
    pub max_images: Option<usize>,
    /// Images per sampling batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { crop: 32, max_images: None, batch_size: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Ψ-DiT against the ControlNet baseline.
    Arch,
    /// Zero-init on/off crossed with the three SSCM init policies.
    Init,
    /// The five mask strategies.
    Mask,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Arch => "arch",
            AblationAxis::Init => "init",
            AblationAxis::Mask => "mask",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub seeds: Vec<u64>,
    /// Trailing SR steps whose median loss sets the convergence threshold.
    pub loss_window: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { axes: vec![AblationAxis::Arch, AblationAxis::Init, AblationAxis::Mask], seeds: vec![0], loss_window: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    /// `stub:` or an HTTP URL.
    pub endpoint: String,
    pub concurrency: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self { endpoint: crate::prompts::STUB_ENDPOINT.into(), concurrency: DEFAULT_CONCURRENCY }
    }
}

/// Everything a run depends on. MimSR runs for `schedule.t_total` steps;
/// pretraining and SFT budgets live in `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: ArchTag,
    pub model: PsiDitConfig,
    pub schedule: MaskScheduleParams,
    pub degradation: DegradationConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub annotate: AnnotateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: ArchTag::PsiDit,
            model: PsiDitConfig::default(),
            schedule: MaskScheduleParams::default(),
            degradation: DegradationConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            annotate: AnnotateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn mim_steps(&self) -> u64 {
        self.schedule.t_total
    }

    pub fn total_steps(&self) -> u64 {
        self.train.pretrain_steps + self.schedule.t_total + self.train.sft_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.degradation.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model.vocab_size < VOCAB_USED {
            return bad(format!("vocab_size {} cannot hold the {VOCAB_USED} caption ids", self.model.vocab_size));
        }
        if self.model.image_size % self.degradation.scale != 0 {
            return bad(format!(
                "image_size {} not divisible by degradation scale {}",
                self.model.image_size, self.degradation.scale
            ));
        }
        if self.corpus.n_train == 0 || self.corpus.n_held_out == 0 {
            return bad("corpus needs at least one training and one held-out scene".into());
        }
        if self.eval.crop == 0 || self.eval.crop > self.model.image_size {
            return bad(format!("eval crop {} outside 1..={}", self.eval.crop, self.model.image_size));
        }
        if self.eval.batch_size == 0 || self.eval.max_images == Some(0) {
            return bad("eval batch_size and max_images must be positive".into());
        }
        if self.ablation.seeds.is_empty() || self.ablation.loss_window == 0 {
            return bad("ablation needs at least one seed and a positive loss_window".into());
        }
        if self.annotate.concurrency == 0 {
            return bad("annotate concurrency must be positive".into());
        }
        Ok(())
    }
}

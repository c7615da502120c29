use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{conditioning_tokens, gaussian_tokens, image_tokens, rf_interpolate_rows, velocity_target};
use crate::degradation::{degrade, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::mask_curriculum::{self, MaskScheduleParams};
use crate::numeric::{Objective, Tensor};
use crate::params::ParamStore;
use crate::psi_dit::{names, Arch, Forward, PsiDitConfig};
use crate::rng;
use crate::token_codec::{TokenStreams, CAPTION_LEN, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Caption-only pretraining of the base.
    #[serde(rename = "pretrain_t2i")]
    PretrainT2I,
    /// Masked LR conditioning under the mask schedule.
    #[serde(rename = "mim_sr")]
    MimSR,
    /// Unmasked LR conditioning.
    #[serde(rename = "sft_sr")]
    SftSR,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainT2I => "pretrain_t2i",
            Phase::MimSR => "mim_sr",
            Phase::SftSR => "sft_sr",
        }
    }

    pub fn is_sr(self) -> bool {
        !matches!(self, Phase::PretrainT2I)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_pretrain: f32,
    pub lr_sr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Global gradient-norm clip; `null` disables.
    pub clip_norm: Option<f32>,
    /// Probability of replacing a caption by padding.
    pub caption_drop: f64,
    pub pretrain_steps: u64,
    pub sft_steps: u64,
    /// Euler steps used when sampling.
    pub sample_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_pretrain: 1e-3,
            lr_sr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: Some(1.0),
            caption_drop: 0.0,
            pretrain_steps: 3000,
            sft_steps: 1000,
            sample_steps: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_pretrain > 0.0 && self.lr_sr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.caption_drop) {
            return bad("caption_drop must lie in [0, 1]");
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be at least 1");
        }
        Ok(())
    }
}

/// HR training images with their captions and precomputed clean tokens.
pub struct TrainData {
    pub hr: Vec<ImageGrid>,
    pub captions: Vec<Vec<u32>>,
    pub x0: Vec<Tensor>,
}

impl TrainData {
    pub fn new(hr: Vec<ImageGrid>, captions: Vec<Vec<u32>>, patch: usize) -> Result<Self> {
        if hr.is_empty() || hr.len() != captions.len() {
            return Err(Error::Invalid("training data needs one caption per image".into()));
        }
        let x0 = hr.iter().map(|h| image_tokens(h, patch)).collect::<Result<_>>()?;
        Ok(Self { hr, captions, x0 })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B·Nn, W]` clean tokens.
    pub x0: Tensor,
    /// LR images (empty during pretraining).
    pub lr: Vec<ImageGrid>,
    /// `[B·Nn, W]` LR tokens on the HR grid, zeros during pretraining.
    pub lr_tokens: Tensor,
    /// `B × CAPTION_LEN` ids.
    pub captions: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    PhaseStart { phase: Phase, step: u64, trainable: usize, frozen_digest: String },
    Step { step: u64, phase: Phase, loss: f64, mask_ratio: f64, kept: usize, grad_norm: f64 },
    PhaseEnd { phase: Phase, step: u64, frozen_digest: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Global step, incremented once per update.
    pub step: u64,
    /// Step within the current phase (the mask schedule's `p`).
    pub phase_step: u64,
    pub optimizer: Adam,
    pub frozen_digest: String,
    pub log: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(phase: Phase, cfg: &TrainConfig) -> Self {
        Self {
            phase,
            step: 0,
            phase_step: 0,
            optimizer: optimizer_for(phase, cfg),
            frozen_digest: String::new(),
            log: Vec::new(),
        }
    }

    /// Losses logged for `phase`, in step order.
    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { phase: p, loss, .. } if *p == phase => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }
}

fn optimizer_for(phase: Phase, cfg: &TrainConfig) -> Adam {
    let lr = if phase.is_sr() { cfg.lr_sr } else { cfg.lr_pretrain };
    Adam::new(lr, cfg.beta1, cfg.beta2, cfg.clip_norm)
}

/// Pretraining trains everything; SR phases train only SSCM or replica tensors.
pub fn freeze_for_phase(params: &mut ParamStore, phase: Phase) {
    if phase.is_sr() {
        params.set_trainable_where(|n| n.starts_with("sscm.") || n.starts_with("ctrl."));
    } else {
        params.set_trainable_where(|_| true);
    }
}

/// Everything a training run reads but never writes.
pub struct Trainer<'a> {
    pub model: &'a PsiDitConfig,
    pub train: &'a TrainConfig,
    pub schedule: &'a MaskScheduleParams,
    pub degradation: &'a DegradationConfig,
    pub data: &'a TrainData,
    /// Architecture used in SR phases.
    pub arch: Arch,
    pub seed: u64,
}

impl Trainer<'_> {
    /// Batch for the state's current step. Items are drawn without
    /// replacement from the `batch` stream; each LR is degraded on the stream
    /// keyed by `(step, slot)`.
    pub fn make_batch(&self, state: &TrainState) -> Result<Batch> {
        let n = self.data.len();
        let b = self.train.batch_size;
        let mut rng = rng::stream(self.seed, rng::names::BATCH, state.step);
        let indices: Vec<usize> = if n >= b {
            index::sample(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        };
        let (nn, w) = (self.model.tokens(), self.model.token_width());
        let mut x0 = Vec::with_capacity(b * nn * w);
        let mut lr_tok = Vec::with_capacity(b * nn * w);
        let mut lr = Vec::new();
        let mut captions = Vec::with_capacity(b * CAPTION_LEN);
        for (slot, &i) in indices.iter().enumerate() {
            x0.extend_from_slice(self.data.x0[i].data());
            let mut cap = self.data.captions[i].clone();
            if self.train.caption_drop > 0.0 {
                let mut r = rng::stream2(self.seed, rng::names::CAPTION_DROP, state.step, slot as u64);
                if r.random::<f64>() < self.train.caption_drop {
                    cap = vec![PAD_ID; CAPTION_LEN];
                }
            }
            captions.extend(cap);
            if state.phase.is_sr() {
                let mut r = rng::stream2(self.seed, rng::names::DEGRADE, state.step, slot as u64);
                let img = degrade(&self.data.hr[i], self.degradation, &mut r)?;
                lr_tok.extend_from_slice(conditioning_tokens(&img, self.model)?.data());
                lr.push(img);
            }
        }
        if lr_tok.is_empty() {
            lr_tok = vec![0.0; b * nn * w];
        }
        Ok(Batch {
            indices,
            x0: Tensor::from_vec(&[b * nn, w], x0)?,
            lr,
            lr_tokens: Tensor::from_vec(&[b * nn, w], lr_tok)?,
            captions,
        })
    }

    /// One optimizer update. Returns the batch loss before the update.
    pub fn train_step(&self, state: &mut TrainState, params: &mut ParamStore, batch: &Batch) -> Result<f64> {
        let b = batch.indices.len();
        let (nn, w) = (self.model.tokens(), self.model.token_width());
        let mut taus = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b * nn * w);
        for slot in 0..b as u64 {
            taus.push(rng::stream2(self.seed, rng::names::TAU, state.step, slot).random::<f64>());
            let mut r = rng::stream2(self.seed, rng::names::NOISE, state.step, slot);
            eps.extend_from_slice(gaussian_tokens(nn, w, &mut r).data());
        }
        let eps = Tensor::from_vec(&[b * nn, w], eps)?;
        let x_tau = rf_interpolate_rows(&batch.x0, &eps, &taus)?;
        let target = velocity_target(&batch.x0, &eps)?;

        let (ratio, kept) = match state.phase {
            Phase::PretrainT2I => (1.0, vec![Vec::new(); b]),
            Phase::MimSR => {
                let plan = mask_curriculum::plan(state.phase_step, self.schedule, self.seed, b, nn)?;
                (plan.ratio, plan.kept)
            }
            Phase::SftSR => (0.0, vec![(0..nn).collect(); b]),
        };
        let kept_count = kept[0].len();
        let streams = TokenStreams::new(batch.captions.clone(), x_tau, &batch.lr_tokens, kept)?;
        let arch = if state.phase.is_sr() { self.arch } else { Arch::Base };

        let (loss, grads) = {
            let mut f = Forward::new(self.model, vec![&*params]);
            let v = f.velocity(&streams, &taus, arch)?;
            let l = f.tape.mse(v, &target);
            let loss = f.tape.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::LossDiverged { step: state.step, phase: state.phase.as_str().into(), loss });
            }
            let g = f.tape.backward(l);
            (loss, f.trainable_grads(&g))
        };
        let grad_norm = state.optimizer.step(params, &grads)?;
        state.log.push(LogRecord::Step {
            step: state.step,
            phase: state.phase,
            loss,
            mask_ratio: ratio,
            kept: kept_count,
            grad_norm: grad_norm as f64,
        });
        state.step += 1;
        state.phase_step += 1;
        Ok(loss)
    }

    /// Enters `phase` (freeze mask, fresh optimizer) and runs `steps` updates.
    pub fn run_phase(&self, state: &mut TrainState, params: &mut ParamStore, phase: Phase, steps: u64) -> Result<()> {
        if phase.is_sr() {
            if !params.contains(names::PATCH_W) || !params.contains(names::FINAL_W) {
                return Err(Error::MissingBase("SR training needs pretrained base weights".into()));
            }
            let marker = match self.arch {
                Arch::PsiDit => names::LR_EMBED_W.to_string(),
                Arch::ControlNet => names::ctrl(0, "inject.w"),
                Arch::Base => return Err(Error::Config("SR phases need psi_dit or controlnet".into())),
            };
            if !params.contains(&marker) {
                return Err(Error::MissingParam(marker));
            }
        }
        freeze_for_phase(params, phase);
        if state.phase != phase || state.optimizer.t == 0 {
            state.optimizer = optimizer_for(phase, self.train);
            state.phase_step = 0;
        }
        state.phase = phase;
        state.frozen_digest = params.frozen_digest();
        state.log.push(LogRecord::PhaseStart {
            phase,
            step: state.step,
            trainable: crate::params::count_params(params, true),
            frozen_digest: state.frozen_digest.clone(),
        });
        for _ in 0..steps {
            let batch = self.make_batch(state)?;
            self.train_step(state, params, &batch)?;
        }
        state.log.push(LogRecord::PhaseEnd { phase, step: state.step, frozen_digest: params.frozen_digest() });
        Ok(())
    }
}

/// Rectified-flow loss of a fixed batch as a function of the parameters.
pub struct RfObjective<'a> {
    pub model: &'a PsiDitConfig,
    pub arch: Arch,
    /// Streams whose noise tokens are already `x_τ`.
    pub streams: TokenStreams<f64>,
    pub taus: Vec<f64>,
    pub target: Tensor<f64>,
}

impl RfObjective<'_> {
    fn eval(&self, params: &ParamStore<f64>, grads: bool) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
        let mut f = Forward::new(self.model, vec![params]);
        let v = f.velocity(&self.streams, &self.taus, self.arch)?;
        let l = f.tape.mse(v, &self.target);
        let loss = f.tape.value(l).data()[0];
        if !grads {
            return Ok((loss, BTreeMap::new()));
        }
        let g = f.tape.backward(l);
        Ok((loss, f.trainable_grads(&g)))
    }
}

impl Objective for RfObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn loss_and_grad(&self, params: &ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
        self.eval(params, true)
    }
}

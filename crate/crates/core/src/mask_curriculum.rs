//! Progressive masking of LR conditioning tokens.
//!
//! The PMS ratio for step `p < k` is
//! `r = clamp(1 − (1 − r_min)·(i + σ)/c, r_min, 1)` with stage `i = ⌊p·c/k⌋`
//! and `σ ~ N(0, 1)` (or 0); from step `k` on it is exactly `r_min`.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskStrategy {
    /// No masking (`r = 0`).
    None,
    Fixed { ratio: f64 },
    Uniform { lo: f64, hi: f64 },
    /// The progressive schedule.
    Pms,
}

impl MaskStrategy {
    pub fn label(&self) -> String {
        match self {
            MaskStrategy::None => "none".into(),
            MaskStrategy::Fixed { ratio } => format!("fixed_{ratio}"),
            MaskStrategy::Uniform { lo, hi } => format!("uniform_{lo}_{hi}"),
            MaskStrategy::Pms => "pms".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskScheduleParams {
    pub r_min: f64,
    /// Total masked-training steps.
    pub t_total: u64,
    /// Progressive steps; the ratio settles at `r_min` from here on.
    pub k: u64,
    /// Number of progressive stages.
    pub c: u64,
    pub sigma_enabled: bool,
    pub strategy: MaskStrategy,
}

impl Default for MaskScheduleParams {
    fn default() -> Self {
        Self { r_min: 0.75, t_total: 2000, k: 1000, c: 10, sigma_enabled: true, strategy: MaskStrategy::Pms }
    }
}

impl MaskScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.r_min) {
            return bad(format!("r_min {} outside [0, 1]", self.r_min));
        }
        if self.k == 0 || self.k > self.t_total {
            return bad(format!("need 0 < k <= t_total, got k={} t_total={}", self.k, self.t_total));
        }
        if self.c == 0 {
            return bad("c must be at least 1".into());
        }
        match self.strategy {
            MaskStrategy::Fixed { ratio } if !unit(ratio) => bad(format!("fixed ratio {ratio} outside [0, 1]")),
            MaskStrategy::Uniform { lo, hi } if !(unit(lo) && unit(hi) && lo <= hi) => {
                bad(format!("uniform range [{lo}, {hi}] invalid"))
            }
            _ => Ok(()),
        }
    }

    /// Stage index `⌊p·c/k⌋` for `p < k`.
    pub fn stage(&self, p: u64) -> u64 {
        (p as u128 * self.c as u128 / self.k as u128) as u64
    }

    /// The PMS ratio at step `p` for a given `σ`.
    pub fn pms_ratio(&self, p: u64, sigma: f64) -> f64 {
        if p >= self.k {
            return self.r_min;
        }
        let i = self.stage(p) as f64;
        let raw = 1.0 - (1.0 - self.r_min) * (i + sigma) / self.c as f64;
        raw.clamp(self.r_min, 1.0)
    }
}

/// Mask ratio for step `p`. Only PMS and uniform strategies draw from `rng`.
pub fn mask_ratio(p: u64, params: &MaskScheduleParams, rng: &mut impl Rng) -> Result<f64> {
    params.validate()?;
    Ok(match params.strategy {
        MaskStrategy::None => 0.0,
        MaskStrategy::Fixed { ratio } => ratio,
        MaskStrategy::Uniform { lo, hi } => {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        MaskStrategy::Pms => {
            let sigma = if params.sigma_enabled && p < params.k { rng.sample(StandardNormal) } else { 0.0 };
            params.pms_ratio(p, sigma)
        }
    })
}

/// Number of masked tokens, `round(r·nl)` with halves away from zero.
pub fn masked_count(nl: usize, r: f64) -> usize {
    ((r * nl as f64).round() as usize).min(nl)
}

/// Masks exactly `round(r·nl)` of `0..nl` uniformly without replacement;
/// returns the kept indices in ascending order.
pub fn sample_mask(nl: usize, r: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if nl == 0 {
        return Err(Error::Invalid("sample_mask needs at least one token".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("mask ratio {r} outside [0, 1]")));
    }
    let m = masked_count(nl, r);
    let mut masked = vec![false; nl];
    for i in index::sample(rng, nl, m) {
        masked[i] = true;
    }
    Ok((0..nl).filter(|&i| !masked[i]).collect())
}

/// The concrete mask for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub step: u64,
    pub ratio: f64,
    pub kept: Vec<Vec<usize>>,
}

/// Draws the step's ratio from the `mask-ratio` stream and each item's
/// indices from the `mask-indices` stream keyed by `(step, item)`.
pub fn plan(step: u64, params: &MaskScheduleParams, seed: u64, batch: usize, nl: usize) -> Result<MaskPlan> {
    let ratio = mask_ratio(step, params, &mut rng::stream(seed, rng::names::MASK_RATIO, step))?;
    let kept = (0..batch)
        .map(|b| sample_mask(nl, ratio, &mut rng::stream2(seed, rng::names::MASK_INDICES, step, b as u64)))
        .collect::<Result<_>>()?;
    Ok(MaskPlan { step, ratio, kept })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub p: u64,
    pub r_sigma0: f64,
    pub r_mc_mean: f64,
}

/// One row per step `0..=t_total`: the `σ = 0` ratio and a Monte-Carlo mean
/// over `draws` σ samples (seeded per step).
pub fn schedule_trace(params: &MaskScheduleParams, draws: usize, seed: u64) -> Result<Vec<TraceRow>> {
    params.validate()?;
    let mut rows = Vec::with_capacity(params.t_total as usize + 1);
    for p in 0..=params.t_total {
        let r_sigma0 = params.pms_ratio(p, 0.0);
        let r_mc_mean = if p >= params.k || !params.sigma_enabled || draws == 0 {
            r_sigma0
        } else {
            let mut rng = rng::stream(seed, rng::names::MASK_RATIO, p);
            let sum: f64 = (0..draws).map(|_| params.pms_ratio(p, rng.sample(StandardNormal))).sum();
            sum / draws as f64
        };
        rows.push(TraceRow { p, r_sigma0, r_mc_mean });
    }
    Ok(rows)
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("p,r_sigma0,r_mc_mean\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.p, r.r_sigma0, r.r_mc_mean);
    }
    s
}

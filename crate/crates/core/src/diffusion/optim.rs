use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ParamStore;

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: Option<f32>,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, clip_norm: Option<f32>) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, clip_norm, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Updates every parameter named in `grads`; names must be trainable.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f32> {
        let mut sq = 0.0f64;
        for g in grads.values() {
            sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        let norm = sq.sqrt() as f32;
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if !p.trainable {
                return Err(Error::Invalid(format!("optimizer asked to update frozen `{name}`")));
            }
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

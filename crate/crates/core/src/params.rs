//! Named parameter tensors with trainable flags and init provenance.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// Where the initial values came from, e.g. `random`, `zero`,
    /// `copy:blocks.0.noise.qkv.w`, `checkpoint`.
    pub provenance: String,
}

/// Parameters keyed by unique name. Iteration is in name order, which fixes
/// every reduction and serialization order downstream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
        provenance: impl Into<String>,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { tensor, trainable, provenance: provenance.into() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Sets `trainable` on every parameter to `pred(name)`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Moves every parameter of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.tensor, p.trainable, p.provenance)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                            provenance: p.provenance.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.all_finite())
    }
}

/// Exact element count over all (or only trainable) tensors.
pub fn count_params<T: Real>(params: &ParamStore<T>, trainable_only: bool) -> usize {
    params
        .iter()
        .filter(|(_, p)| !trainable_only || p.trainable)
        .map(|(_, p)| p.tensor.len())
        .sum()
}

impl ParamStore<f32> {
    /// SHA-256 over (name, shape, value bits) of the selected tensors, in name order.
    pub fn digest_where(&self, pred: impl Fn(&str, &Param<f32>) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if !pred(name, p) {
                continue;
            }
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn frozen_digest(&self) -> String {
        self.digest_where(|_, p| !p.trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_params_basics() {
        let empty = ParamStore::<f32>::new();
        assert_eq!(count_params(&empty, false), 0);
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[4, 4]), true, "zero").unwrap();
        assert_eq!(count_params(&s, false), 16);
        s.insert("b", Tensor::zeros(&[3]), false, "zero").unwrap();
        assert_eq!(count_params(&s, false), 19);
        assert_eq!(count_params(&s, true), 16);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[1]), true, "zero").unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1]), true, "zero").is_err());
    }

    #[test]
    fn frozen_digest_ignores_trainable_tensors() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(&[2], 1.0), false, "x").unwrap();
        s.insert("b", Tensor::full(&[2], 1.0), true, "x").unwrap();
        let d0 = s.frozen_digest();
        s.get_mut("b").unwrap().tensor.data_mut()[0] = 5.0;
        assert_eq!(d0, s.frozen_digest());
        s.get_mut("a").unwrap().tensor.data_mut()[0] = 5.0;
        assert_ne!(d0, s.frozen_digest());
    }
}

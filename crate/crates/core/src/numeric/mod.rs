//! Dense-tensor primitives and the finite-difference gradient contract.
//!
//! Training runs in `f32`; every op is generic over [`Real`] so the same
//! code path can be re-run in `f64` for [`grad_check`].

pub mod kernels;
pub mod tape;
pub mod tensor;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

pub use tape::{Grads, Tape, Var};
pub use tensor::{gemm, MatMut, MatRef, Real, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `softmax(q·kᵀ/√d)·v` over `[B, H, N, d]` tensors.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 4 || k.rank() != 4 || v.rank() != 4 {
        return Err(Error::Shape("attention expects rank-4 [B,H,N,d] tensors".into()));
    }
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let (b, h, nq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let nk = ks[2];
    if ks[0] != b || ks[1] != h || ks[3] != d || vs != ks {
        return Err(Error::Shape(format!("attention q {qs:?} k {ks:?} v {vs:?}")));
    }
    if d == 0 || nk == 0 {
        return Err(Error::Shape("attention needs d > 0 and at least one key".into()));
    }
    q.ensure_finite("attention query")?;
    k.ensure_finite("attention key")?;
    v.ensure_finite("attention value")?;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut out = Tensor::zeros(qs);
    let mut probs = vec![T::zero(); nq * nk];
    for bh in 0..b * h {
        let qm = MatRef::new(&q.data()[bh * nq * d..(bh + 1) * nq * d], nq, d);
        let km = MatRef::new(&k.data()[bh * nk * d..(bh + 1) * nk * d], nk, d);
        let vm = MatRef::new(&v.data()[bh * nk * d..(bh + 1) * nk * d], nk, d);
        let om = MatMut::new(&mut out.data_mut()[bh * nq * d..(bh + 1) * nq * d], nq, d);
        kernels::attention_head_forward(qm, km, vm, scale, &mut probs, om);
    }
    out.ensure_finite("attention output")?;
    Ok(out)
}

/// Per-token normalization over the last axis of `x: [B, N, D]`, then
/// `(1 + scale)·x̂ + shift` with `scale, shift: [B, D]`.
pub fn modulated_layer_norm<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || scale.rank() != 2 || shift.rank() != 2 {
        return Err(Error::Shape("modulated_layer_norm expects x [B,N,D], scale/shift [B,D]".into()));
    }
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if scale.shape() != [b, d] || shift.shape() != [b, d] {
        return Err(Error::Shape(format!(
            "modulation {:?}/{:?} does not match x {:?}",
            scale.shape(),
            shift.shape(),
            x.shape()
        )));
    }
    x.ensure_finite("layer norm input")?;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); b * n];
    kernels::mod_ln_forward(x.data(), scale.data(), shift.data(), d, n.max(1), y.data_mut(), &mut xhat, &mut inv);
    y.ensure_finite("layer norm output")?;
    Ok(y)
}

/// A differentiable scalar objective over a parameter store.
pub trait Objective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64>;

    /// Loss and analytic gradients for the trainable tensors.
    fn loss_and_grad(&self, params: &ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    /// `|a − f| / max(|a|, |f|, 1e-8)`
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    pub fn fraction_below(&self, tol: f64) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        let ok = self.samples.iter().filter(|s| s.rel_error < tol).count();
        ok as f64 / self.samples.len() as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// Central-difference check of `n_samples` trainable entries chosen uniformly
/// without replacement.
pub fn grad_check<O: Objective, R: Rng>(
    objective: &O,
    params: &ParamStore<f64>,
    n_samples: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradReport> {
    let first = objective.loss(params)?;
    let second = objective.loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }
    let (_, grads) = objective.loss_and_grad(params)?;

    let entries: Vec<(&String, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n, p.tensor.len()))
        .collect();
    let total: usize = entries.iter().map(|e| e.1).sum();
    let n = n_samples.min(total);
    let mut picks: Vec<usize> = index::sample(rng, total, n).into_vec();
    picks.sort_unstable();

    let mut report = GradReport::default();
    let mut work = params.clone();
    let mut offset = 0;
    let mut pick = picks.iter().peekable();
    for (name, len) in entries {
        while let Some(&&g) = pick.peek() {
            if g >= offset + len {
                break;
            }
            let i = g - offset;
            let orig = work.tensor(name)?.data()[i];
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig + h;
            let plus = objective.loss(&work)?;
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig - h;
            let minus = objective.loss(&work)?;
            work.get_mut(name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(name).map(|t| t.data()[i]).unwrap_or(0.0);
            report.samples.push(GradSample {
                param: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: GradReport::relative_error(analytic, numeric),
            });
            pick.next();
        }
        offset += len;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let q = t4([1, 1, 2, 2], vec![0.3, -2.0, 5.0, 1.0]);
        let k = t4([1, 1, 1, 2], vec![0.7, 0.1]);
        let v = t4([1, 1, 1, 2], vec![4.0, -3.0]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(o.data(), &[4.0, -3.0, 4.0, -3.0]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let q = t4([1, 1, 1, 2], vec![1.0, 0.0]);
        let k = t4([1, 1, 3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 3.0]);
        let v = t4([1, 1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((o.data()[0] - 3.0).abs() < 1e-12);
        assert!((o.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_key_softmax() {
        let q = t4([1, 1, 1, 1], vec![1.0]);
        let k = t4([1, 1, 2, 1], vec![1.0, 2.0]);
        let v = t4([1, 1, 2, 1], vec![0.0, 1.0]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        // weight on the second key is σ(2 − 1) = 1 / (1 + e⁻¹)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((o.data()[0] - expected).abs() < 1e-12);
        assert!((o.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn attention_rejects_bad_shapes_and_nan() {
        let q = t4([1, 1, 1, 2], vec![1.0, 0.0]);
        let k = t4([1, 1, 2, 3], vec![0.0; 6]);
        assert!(scaled_dot_attention(&q, &k, &k).is_err());
        let k = t4([1, 1, 1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(scaled_dot_attention(&q, &k, &k), Err(Error::NonFinite(_))));
    }

    #[test]
    fn identity_modulation_on_normalized_rows() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let z = Tensor::zeros(&[1, 4]);
        let y = modulated_layer_norm(&x, &z, &z).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_row_yields_shift() {
        let x = Tensor::<f64>::full(&[1, 2, 3], 7.5);
        let scale = Tensor::from_vec(&[1, 3], vec![0.5, 2.0, -1.0]).unwrap();
        let shift = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = modulated_layer_norm(&x, &scale, &shift).unwrap();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn output_mean_tracks_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_vec(&[2, 5, 16], (0..160).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let scale = Tensor::from_vec(&[2, 16], [vec![0.4; 16], vec![-0.2; 16]].concat()).unwrap();
        let shift = Tensor::from_vec(&[2, 16], [vec![1.5; 16], vec![-0.7; 16]].concat()).unwrap();
        let y = modulated_layer_norm(&x, &scale, &shift).unwrap();
        for (r, row) in y.data().chunks(16).enumerate() {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let want = if r < 5 { 1.5 } else { -0.7 };
            assert!((mean - want).abs() < 1e-4, "row {r}: {mean}");
        }
    }

    struct Square;
    impl Objective for Square {
        fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
            let w = p.tensor("w")?.data()[0];
            Ok(w * w)
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            let w = p.tensor("w")?.data()[0];
            Ok((w * w, BTreeMap::from([("w".to_string(), Tensor::scalar(2.0 * w))])))
        }
    }

    #[test]
    fn grad_check_closed_form_square() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::scalar(3.0), true, "fixed").unwrap();
        let r = grad_check(&Square, &p, 1, 1e-5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert!((r.samples[0].analytic - 6.0).abs() < 1e-8);
        assert!((r.samples[0].numeric - 6.0).abs() < 1e-8);
    }

    struct Flaky(std::cell::Cell<f64>);
    impl Objective for Flaky {
        fn loss(&self, _: &ParamStore<f64>) -> Result<f64> {
            self.0.set(self.0.get() + 1.0);
            Ok(self.0.get())
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            Ok((self.loss(p)?, BTreeMap::new()))
        }
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::scalar(1.0), true, "fixed").unwrap();
        let r = grad_check(&Flaky(Default::default()), &p, 1, 1e-5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NonDeterministic(..))));
    }

    /// Single linear layer + MSE on fixed data, gradients from the tape.
    struct LinearMse {
        x: Tensor<f64>,
        y: Tensor<f64>,
    }
    impl LinearMse {
        fn run(&self, p: &ParamStore<f64>, grad: bool) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            let mut tape = Tape::new();
            let x = tape.constant(self.x.clone());
            let w = tape.param(p.tensor("w")?.clone());
            let b = tape.param(p.tensor("b")?.clone());
            let o = tape.linear(x, w, b);
            let l = tape.mse(o, &self.y);
            let loss = tape.value(l).data()[0];
            let mut out = BTreeMap::new();
            if grad {
                let g = tape.backward(l);
                out.insert("w".into(), Tensor::from_vec(p.tensor("w")?.shape(), g.get(w).unwrap().to_vec())?);
                out.insert("b".into(), Tensor::from_vec(p.tensor("b")?.shape(), g.get(b).unwrap().to_vec())?);
            }
            Ok((loss, out))
        }
    }
    impl Objective for LinearMse {
        fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
            Ok(self.run(p, false)?.0)
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            self.run(p, true)
        }
    }

    #[test]
    fn grad_check_linear_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let obj = LinearMse {
            x: Tensor::from_vec(&[8, 6], r(48)).unwrap(),
            y: Tensor::from_vec(&[8, 3], r(24)).unwrap(),
        };
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_vec(&[6, 3], r(18)).unwrap(), true, "random").unwrap();
        p.insert("b", Tensor::from_vec(&[3], r(3)).unwrap(), true, "random").unwrap();
        let rep = grad_check(&obj, &p, 21, 1e-6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(rep.samples.len(), 21);
        assert!(rep.fraction_below(1e-4) >= 0.99, "max rel err {}", rep.max_rel_error());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut s = vals.clone();
            kernels::softmax_rows(&mut s, 3, 4);
            for row in s.chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn attention_is_key_permutation_equivariant(
            q in proptest::collection::vec(-2.0f64..2.0, 6),
            kv in proptest::collection::vec(-2.0f64..2.0, 24),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let k = t4([1, 1, 4, 3], kv[..12].to_vec());
            let v = t4([1, 1, 4, 3], kv[12..].to_vec());
            let q = t4([1, 1, 2, 3], q);
            let permute = |t: &Tensor<f64>| {
                let mut d = Vec::new();
                for &p in &perm { d.extend_from_slice(&t.data()[p * 3..p * 3 + 3]); }
                t4([1, 1, 4, 3], d)
            };
            let a = scaled_dot_attention(&q, &k, &v).unwrap();
            let b = scaled_dot_attention(&q, &permute(&k), &permute(&v)).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }

        #[test]
        fn ops_are_pure(vals in proptest::collection::vec(-5.0f32..5.0, 24)) {
            let x = Tensor::from_vec(&[1, 3, 8], vals.clone()).unwrap();
            let s = Tensor::from_vec(&[1, 8], vals[..8].to_vec()).unwrap();
            let a = modulated_layer_norm(&x, &s, &s).unwrap();
            let b = modulated_layer_norm(&x, &s, &s).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}

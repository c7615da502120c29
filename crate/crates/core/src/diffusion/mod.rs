//! Rectified flow: interpolation, loss, the Euler sampler and the phased
//! training loop.
//!
//! Tokens are patch pixels mapped to `[-1, 1]`. With clean tokens `x0` and
//! noise `eps`, `x_τ = (1 − τ)·x0 + τ·eps` and the regression target for the
//! predicted velocity is `eps − x0`.

mod optim;
mod train;

pub use optim::Adam;
pub use train::{
    freeze_for_phase, Batch, LogRecord, Phase, RfObjective, TrainConfig, TrainData, TrainState, Trainer,
};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::numeric::{Real, Tensor};
use crate::params::ParamStore;
use crate::psi_dit::{Arch, Forward, PsiDitConfig};
use crate::rng;
use crate::token_codec::{lr_tokens, patchify, unpatchify, TokenStreams};

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("flow time {tau} outside [0, 1]")));
    }
    Ok(())
}

pub fn rf_interpolate<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    rf_interpolate_rows(x0, eps, &[tau])
}

/// Interpolation with one flow time per item; rows are split evenly among
/// `taus.len()` items. Endpoints return the inputs unchanged.
pub fn rf_interpolate_rows<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, taus: &[f64]) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    if taus.is_empty() || x0.len() % taus.len() != 0 {
        return Err(Error::Shape(format!("{} values cannot be split over {} items", x0.len(), taus.len())));
    }
    let per = x0.len() / taus.len();
    let mut out = x0.clone();
    for (i, &tau) in taus.iter().enumerate() {
        check_tau(tau)?;
        let range = i * per..(i + 1) * per;
        let dst = &mut out.data_mut()[range.clone()];
        if tau == 0.0 {
            continue;
        }
        if tau == 1.0 {
            dst.copy_from_slice(&eps.data()[range]);
            continue;
        }
        let (a, b) = (T::lit(1.0 - tau), T::lit(tau));
        for (o, &e) in dst.iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// `eps − x0`.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let data = eps.data().iter().zip(x0.data()).map(|(&e, &x)| e - x).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Mean squared error between `pred_v` and `eps − x0`.
pub fn rf_loss<T: Real>(pred_v: &Tensor<T>, x0: &Tensor<T>, eps: &Tensor<T>) -> Result<f64> {
    let target = velocity_target(x0, eps)?;
    if pred_v.len() != target.len() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred_v.shape(), target.shape())));
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred_v.data().iter().zip(target.data()) {
        let d = (p - t).to_f64().unwrap();
        acc += d * d;
    }
    Ok(acc / target.len().max(1) as f64)
}

/// Euler integration of `dx/dτ = v(x, τ)` from `τ = 1` to `τ = 0` in
/// `n_steps` uniform steps.
pub fn euler<T: Real>(
    x1: Tensor<T>,
    n_steps: usize,
    mut v: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if n_steps == 0 {
        return Err(Error::Invalid("sampler needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x1;
    for i in 0..n_steps {
        let tau = 1.0 - i as f64 * dt;
        let vel = v(&x, tau)?;
        if vel.shape() != x.shape() {
            return Err(Error::Shape(format!("velocity {:?} vs state {:?}", vel.shape(), x.shape())));
        }
        let h = T::lit(dt);
        for (o, &d) in x.data_mut().iter_mut().zip(vel.data()) {
            *o = *o - h * d;
        }
    }
    Ok(x)
}

/// Pixel tokens in `[-1, 1]`.
pub fn image_tokens(img: &ImageGrid, patch: usize) -> Result<Tensor> {
    Ok(patchify(img, patch)?.map(|v| 2.0 * v - 1.0))
}

pub fn conditioning_tokens(lr: &ImageGrid, cfg: &PsiDitConfig) -> Result<Tensor> {
    Ok(lr_tokens(lr, cfg.image_size, cfg.image_size, cfg.patch)?.map(|v| 2.0 * v - 1.0))
}

pub fn tokens_to_image(tokens: &Tensor, cfg: &PsiDitConfig) -> Result<ImageGrid> {
    let px = tokens.map(|v| (v + 1.0) * 0.5);
    Ok(unpatchify(&px, cfg.geometry())?.clamp01())
}

/// Gaussian tokens `[rows, cols]` from `rng`.
pub fn gaussian_tokens(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape")
}

/// Super-resolves a batch. Item `i` starts from noise on the `sample` stream
/// keyed by `keys[i]`; LR tokens are never masked.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    cfg: &PsiDitConfig,
    stores: &[&ParamStore],
    arch: Arch,
    lrs: &[&ImageGrid],
    captions: &[Vec<u32>],
    keys: &[u64],
    n_steps: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    let b = lrs.len();
    if captions.len() != b || keys.len() != b || b == 0 {
        return Err(Error::Shape("sample_batch needs one caption and key per LR image".into()));
    }
    let (nn, w) = (cfg.tokens(), cfg.token_width());
    let mut lr_data = Vec::with_capacity(b * nn * w);
    let mut x1 = Vec::with_capacity(b * nn * w);
    for (lr, &key) in lrs.iter().zip(keys) {
        lr_data.extend_from_slice(conditioning_tokens(lr, cfg)?.data());
        x1.extend_from_slice(gaussian_tokens(nn, w, &mut rng::stream(seed, rng::names::SAMPLE, key)).data());
    }
    let lr_full = Tensor::from_vec(&[b * nn, w], lr_data)?;
    let text: Vec<u32> = captions.iter().flatten().copied().collect();
    let kept: Vec<Vec<usize>> = (0..b).map(|_| (0..nn).collect()).collect();
    let template = TokenStreams::new(text, Tensor::zeros(&[b * nn, w]), &lr_full, kept)?;
    let x1 = Tensor::from_vec(&[b * nn, w], x1)?;
    let x0 = euler(x1, n_steps, |x, tau| {
        let mut streams = template.clone();
        streams.noise = x.clone();
        let mut f = Forward::new(cfg, stores.to_vec());
        let v = f.velocity(&streams, &vec![tau; b], arch)?;
        let out = f.tape.value(v).clone();
        out.ensure_finite("sampled velocity")?;
        Ok(out)
    })?;
    x0.data()
        .chunks(nn * w)
        .map(|c| tokens_to_image(&Tensor::from_vec(&[nn, w], c.to_vec())?, cfg))
        .collect()
}

/// Single-image super-resolution.
pub fn sample(
    cfg: &PsiDitConfig,
    stores: &[&ParamStore],
    arch: Arch,
    lr: &ImageGrid,
    caption: &[u32],
    n_steps: usize,
    seed: u64,
) -> Result<ImageGrid> {
    Ok(sample_batch(cfg, stores, arch, &[lr], &[caption.to_vec()], &[0], n_steps, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_names_round_trip() {
        for p in [Phase::PretrainT2I, Phase::MimSR, Phase::SftSR] {
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.as_str()));
            assert_eq!(serde_json::from_str::<Phase>(&json).unwrap(), p);
        }
    }

    #[test]
    fn interpolation_examples() {
        let x0 = Tensor::<f64>::from_vec(&[2], vec![0.3, -1.7]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[2], vec![-0.0, 2.5]).unwrap();
        assert!(rf_interpolate(&x0, &eps, 0.0).unwrap().bit_eq(&x0));
        assert!(rf_interpolate(&x0, &eps, 1.0).unwrap().bit_eq(&eps));
        let mid = rf_interpolate(&Tensor::<f64>::zeros(&[3]), &Tensor::full(&[3], 2.0), 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0, 1.0, 1.0]);
        assert!(rf_interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn loss_examples() {
        let x0 = Tensor::<f64>::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        assert_eq!(rf_loss(&v, &x0, &eps).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(rf_loss(&z, &z, &Tensor::full(&[3], 2.0)).unwrap(), 4.0);
    }

    #[test]
    fn euler_integrates_straight_flow() {
        let x0 = Tensor::<f64>::from_vec(&[4], vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let eps = Tensor::<f64>::from_vec(&[4], vec![-1.0, 0.75, 0.3, 2.0]).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        for n in [1, 2, 7, 20, 100] {
            let out = euler(eps.clone(), n, |_, _| Ok(v.clone())).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-12, "n={n}");
        }
        assert!(euler(eps, 0, |_, _| Ok(v.clone())).is_err());
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_permutation_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 18)) {
            let p = Tensor::from_vec(&[3, 2], vals[..6].to_vec()).unwrap();
            let x0 = Tensor::from_vec(&[3, 2], vals[6..12].to_vec()).unwrap();
            let eps = Tensor::from_vec(&[3, 2], vals[12..].to_vec()).unwrap();
            let l = rf_loss(&p, &x0, &eps).unwrap();
            prop_assert!(l >= 0.0);
            // Swap items 0 and 2 in all three tensors.
            let swap = |t: &Tensor<f64>| {
                let d = t.data();
                Tensor::from_vec(&[3, 2], vec![d[4], d[5], d[2], d[3], d[0], d[1]]).unwrap()
            };
            let l2 = rf_loss(&swap(&p), &swap(&x0), &swap(&eps)).unwrap();
            prop_assert!((l - l2).abs() <= 1e-12 * l.max(1.0));
        }
    }
}

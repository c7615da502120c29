//! Forward/backward kernels shared by the public ops and the tape.
//!
//! Every reduction runs sequentially in index order so results are
//! bit-reproducible.

use super::tensor::{gemm, MatMut, MatRef, Real};

/// Row softmax in place over `rows × cols`.
pub(crate) fn softmax_rows<T: Real>(s: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// One attention head: `out = softmax(scale · q·kᵀ) · v`, keeping the
/// probabilities (`nq × nk`, row-major) for the backward pass.
pub(crate) fn attention_head_forward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    scale: T,
    probs: &mut [T],
    out: MatMut<'_, T>,
) {
    let (nq, nk) = (q.rows, k.rows);
    debug_assert_eq!(probs.len(), nq * nk);
    gemm(scale, q, k.t(), T::zero(), MatMut::new(probs, nq, nk));
    softmax_rows(probs, nq, nk);
    gemm(T::one(), MatRef::new(probs, nq, nk), v, T::zero(), out);
}

/// Gradients of one attention head, accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_head_backward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    probs: &[T],
    dout: MatRef<'_, T>,
    scale: T,
    scratch: &mut Vec<T>,
    dq: Option<MatMut<'_, T>>,
    dk: Option<MatMut<'_, T>>,
    dv: Option<MatMut<'_, T>>,
) {
    let (nq, nk) = (q.rows, k.rows);
    let p = MatRef::new(probs, nq, nk);
    if let Some(dv) = dv {
        gemm(T::one(), p.t(), dout, T::one(), dv);
    }
    if dq.is_none() && dk.is_none() {
        return;
    }
    scratch.clear();
    scratch.resize(nq * nk, T::zero());
    // dP = dO · Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P))
    gemm(T::one(), dout, v.t(), T::zero(), MatMut::new(scratch, nq, nk));
    for r in 0..nq {
        let pr = &probs[r * nk..(r + 1) * nk];
        let dr = &mut scratch[r * nk..(r + 1) * nk];
        let mut dot = T::zero();
        for (a, b) in pr.iter().zip(dr.iter()) {
            dot = dot + *a * *b;
        }
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot);
        }
    }
    let ds = MatRef::new(scratch, nq, nk);
    if let Some(dq) = dq {
        gemm(scale, ds, k, T::one(), dq);
    }
    if let Some(dk) = dk {
        gemm(scale, ds.t(), q, T::one(), dk);
    }
}

/// Normalization epsilon (added to the variance under the square root).
pub const NORM_EPS: f64 = 1e-6;

/// Modulated layer norm over `groups × rows_per_group` rows of width `d`.
/// Writes `y`, and the normalized rows and inverse deviations for backward.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mod_ln_forward<T: Real>(
    x: &[T],
    scale: &[T],
    shift: &[T],
    d: usize,
    rows_per_group: usize,
    y: &mut [T],
    xhat: &mut [T],
    inv_std: &mut [T],
) {
    let rows = x.len() / d;
    let eps = T::lit(NORM_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rows {
        let g = r / rows_per_group;
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        let sc = &scale[g * d..(g + 1) * d];
        let sh = &shift[g * d..(g + 1) * d];
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = (T::one() + sc[j]) * h + sh[j];
        }
    }
}

/// Backward of [`mod_ln_forward`]; accumulates into whichever grads are given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mod_ln_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
    d: usize,
    rows_per_group: usize,
    mut dx: Option<&mut [T]>,
    mut dscale: Option<&mut [T]>,
    mut dshift: Option<&mut [T]>,
) {
    let rows = dy.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let g = r / rows_per_group;
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        if let Some(ds) = dshift.as_deref_mut() {
            for j in 0..d {
                ds[g * d + j] = ds[g * d + j] + dyr[j];
            }
        }
        if let Some(ds) = dscale.as_deref_mut() {
            for j in 0..d {
                ds[g * d + j] = ds[g * d + j] + dyr[j] * hr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let sc = &scale[g * d..(g + 1) * d];
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..d {
                dxhat[j] = dyr[j] * (T::one() + sc[j]);
                m1 = m1 + dxhat[j];
                m2 = m2 + dxhat[j] * hr[j];
            }
            m1 = m1 * inv_d;
            m2 = m2 * inv_d;
            let inv = inv_std[r];
            for j in 0..d {
                dx[r * d + j] = dx[r * d + j] + inv * (dxhat[j] - m1 - hr[j] * m2);
            }
        }
    }
}

/// tanh-approximated GELU and its derivative.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    // 0.5·(1 + tanh u) = σ(2u); exp is much cheaper than tanh in libm.
    x / (T::one() + (T::lit(-2.0) * gelu_arg(x)).exp())
}

fn gelu_arg<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044715);
    c * (x + a * x * x * x)
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044715);
    let s = T::one() / (T::one() + (T::lit(-2.0) * gelu_arg(x)).exp());
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

//! Images, captions and flow times to token sequences, and back.
//!
//! There is no latent autoencoder: a token is one `P×P` RGB patch, flattened
//! as `(row, col, channel)`. The LR image is resampled to the HR grid before
//! patchifying, so LR token `i` and noise token `i` cover the same pixels.

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageGrid, CHANNELS};
use crate::numeric::{Real, Tape, Tensor, Var};
use crate::params::ParamStore;

/// Reserved caption id used to fill sequences up to [`CAPTION_LEN`].
pub const PAD_ID: u32 = 0;
/// Fixed caption length.
pub const CAPTION_LEN: usize = 8;
/// Flow time is multiplied by this before the sinusoid.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Shape(format!("{height}x{width} is not divisible into {patch}x{patch} patches")));
        }
        Ok(Self { height, width, patch })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_width(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// `[N, P·P·C]` tokens in row-major patch order.
pub fn patchify(img: &ImageGrid, patch: usize) -> Result<Tensor<f32>> {
    let geo = PatchGeometry::new(img.height, img.width, patch)?;
    let (gh, gw) = geo.grid();
    let tw = geo.token_width();
    let mut data = Vec::with_capacity(geo.tokens() * tw);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * img.width + px * patch;
                data.extend_from_slice(&img.data[row * CHANNELS..(row + patch) * CHANNELS]);
            }
        }
    }
    Tensor::from_vec(&[geo.tokens(), tw], data)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor<f32>, geo: PatchGeometry) -> Result<ImageGrid> {
    if tokens.rows() != geo.tokens() || tokens.cols() != geo.token_width() {
        return Err(Error::Shape(format!(
            "tokens {:?} do not match a {}x{} grid of {}px patches",
            tokens.shape(),
            geo.height,
            geo.width,
            geo.patch
        )));
    }
    let p = geo.patch;
    let (gh, gw) = geo.grid();
    let mut data = vec![0.0; geo.height * geo.width * CHANNELS];
    let mut src = tokens.data().chunks(geo.token_width());
    for py in 0..gh {
        for px in 0..gw {
            let tok = src.next().unwrap();
            for y in 0..p {
                let row = (py * p + y) * geo.width + px * p;
                data[row * CHANNELS..(row + p) * CHANNELS].copy_from_slice(&tok[y * p * CHANNELS..(y + 1) * p * CHANNELS]);
            }
        }
    }
    ImageGrid::new(geo.height, geo.width, data)
}

/// LR conditioning tokens: bilinear resample to the HR grid, then patchify.
pub fn lr_tokens(lr: &ImageGrid, hr_height: usize, hr_width: usize, patch: usize) -> Result<Tensor<f32>> {
    let up = if lr.height == hr_height && lr.width == hr_width {
        lr.clone()
    } else {
        resize_bilinear(lr, hr_height, hr_width)
    };
    patchify(&up, patch)
}

/// Pads `ids` to [`CAPTION_LEN`] and checks the vocabulary.
pub fn pad_caption(ids: &[u32], vocab: usize) -> Result<Vec<u32>> {
    if ids.len() > CAPTION_LEN {
        return Err(Error::Invalid(format!("caption has {} ids, limit is {CAPTION_LEN}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::Invalid(format!("caption id {bad} outside vocabulary of {vocab}")));
    }
    let mut out = ids.to_vec();
    out.resize(CAPTION_LEN, PAD_ID);
    Ok(out)
}

/// Row lookup into `table: [V, D]`; row [`PAD_ID`] is the pad embedding.
pub fn embed_caption<T: Real>(ids: &[u32], table: &Tensor<T>) -> Result<Tensor<T>> {
    let ids = pad_caption(ids, table.rows())?;
    let d = table.cols();
    let mut data = Vec::with_capacity(CAPTION_LEN * d);
    for &i in &ids {
        data.extend_from_slice(&table.data()[i as usize * d..(i as usize + 1) * d]);
    }
    Tensor::from_vec(&[CAPTION_LEN, d], data)
}

/// `[cos(1000·τ·f_i)…, sin(1000·τ·f_i)…]` with `f_i = 10000^(−i/half)`.
pub fn sinusoidal_features<T: Real>(tau: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * tau * freq;
        out[i] = T::lit(arg.cos());
        out[half + i] = T::lit(arg.sin());
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("flow time {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Parameter names of the time embedding MLP.
pub mod time_params {
    pub const FC1_W: &str = "time.fc1.w";
    pub const FC1_B: &str = "time.fc1.b";
    pub const FC2_W: &str = "time.fc2.w";
    pub const FC2_B: &str = "time.fc2.b";
}

/// Time embedding on a tape: sinusoid → linear → SiLU → linear.
/// Returns a `[taus.len(), D]` var.
pub fn timestep_embed_tape<T: Real>(tape: &mut Tape<T>, taus: &[f64], w: [Var; 4]) -> Result<Var> {
    let feat_dim = tape.value(w[0]).rows();
    let mut feats = Vec::with_capacity(taus.len() * feat_dim);
    for &tau in taus {
        check_tau(tau)?;
        feats.extend(sinusoidal_features::<T>(tau, feat_dim));
    }
    let x = tape.constant(Tensor::from_vec(&[taus.len(), feat_dim], feats)?);
    let h = tape.linear(x, w[0], w[1]);
    let h = tape.silu(h);
    Ok(tape.linear(h, w[2], w[3]))
}

/// Time embedding `[D]` for a single flow time using the weights in `params`.
pub fn timestep_embed<T: Real>(tau: f64, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(4);
    for name in [time_params::FC1_W, time_params::FC1_B, time_params::FC2_W, time_params::FC2_B] {
        vars.push(tape.constant(params.tensor(name)?.clone()));
    }
    let w: [Var; 4] = vars.try_into().expect("four time weights");
    let out = timestep_embed_tape(&mut tape, &[tau], w)?;
    let v = tape.value(out).clone();
    let d = v.cols();
    v.reshape(&[d])
}

/// Batched token sequences for the three flows before embedding.
///
/// `lr` holds only the kept LR tokens of each item (`[B·Nl', P·P·C]`), with
/// `lr_kept[b]` listing their grid positions in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreams<T = f32> {
    pub batch: usize,
    /// `B × CAPTION_LEN` ids.
    pub text: Vec<u32>,
    /// `[B·Nn, P·P·C]`
    pub noise: Tensor<T>,
    /// `[B·Nl', P·P·C]`
    pub lr: Tensor<T>,
    pub lr_kept: Vec<Vec<usize>>,
}

impl<T: Real> TokenStreams<T> {
    /// Builds streams from full LR tokens `[B·Nl, W]`, keeping `lr_kept[b]` per item.
    pub fn new(
        text: Vec<u32>,
        noise: Tensor<T>,
        lr_full: &Tensor<T>,
        lr_kept: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let batch = lr_kept.len();
        if batch == 0 || text.len() != batch * CAPTION_LEN {
            return Err(Error::Shape(format!("{} caption ids for batch {batch}", text.len())));
        }
        if noise.rows() % batch != 0 || lr_full.rows() % batch != 0 {
            return Err(Error::Shape("token rows not divisible by batch".into()));
        }
        let nl = lr_full.rows() / batch;
        let kept_len = lr_kept[0].len();
        let w = lr_full.cols();
        let mut data = Vec::with_capacity(batch * kept_len * w);
        for (b, kept) in lr_kept.iter().enumerate() {
            if kept.len() != kept_len {
                return Err(Error::Shape("kept LR counts differ across the batch".into()));
            }
            if kept.windows(2).any(|p| p[0] >= p[1]) || kept.last().is_some_and(|&i| i >= nl) {
                return Err(Error::Invalid(format!("kept indices for item {b} are not strictly increasing within 0..{nl}")));
            }
            for &i in kept {
                let r = b * nl + i;
                data.extend_from_slice(&lr_full.data()[r * w..(r + 1) * w]);
            }
        }
        let lr = Tensor::from_vec(&[batch * kept_len, w], data)?;
        Ok(Self { batch, text, noise, lr, lr_kept })
    }

    pub fn noise_tokens(&self) -> usize {
        self.noise.rows() / self.batch
    }

    pub fn kept_tokens(&self) -> usize {
        self.lr_kept[0].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn patchify_shapes() {
        let img = ImageGrid::filled(8, 8, [0.1, 0.2, 0.3]);
        let t = patchify(&img, 4).unwrap();
        assert_eq!(t.shape(), &[4, 48]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[1, 192]);
        assert!(patchify(&ImageGrid::filled(6, 8, [0.0; 3]), 4).is_err());
    }

    #[test]
    fn unpatchify_zero_and_single_token() {
        let geo = PatchGeometry::new(8, 8, 4).unwrap();
        let img = unpatchify(&Tensor::zeros(&[4, 48]), geo).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
        let mut r = rng::stream(1, "test", 0);
        let full = ImageGrid::new(8, 8, (0..192).map(|_| r.random::<f32>()).collect()).unwrap();
        let one = patchify(&full, 8).unwrap();
        assert_eq!(unpatchify(&one, PatchGeometry::new(8, 8, 8).unwrap()).unwrap(), full);
        assert!(unpatchify(&Tensor::zeros(&[3, 48]), geo).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        // Pixel (y, x) carries value y * 8 + x in the red channel.
        let mut img = ImageGrid::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 0..8 {
                img.set(y, x, 0, (y * 8 + x) as f32);
            }
        }
        let t = patchify(&img, 4).unwrap();
        // token 1 is the top-right patch, its first pixel is (0, 4)
        assert_eq!(t.data()[48], 4.0);
        // token 2 is bottom-left, first pixel (4, 0)
        assert_eq!(t.data()[96], 32.0);
    }

    #[test]
    fn captions_lookup_and_pad() {
        let table = Tensor::<f64>::from_vec(&[4, 2], vec![0.0, 0.0, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]).unwrap();
        let a = embed_caption(&[1, 2, 3], &table).unwrap();
        let b = embed_caption(&[1, 2, 3], &table).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[CAPTION_LEN, 2]);
        assert_eq!(&a.data()[6..], &[0.0; 10]);
        let pad = embed_caption(&[], &table).unwrap();
        assert!(pad.data().iter().all(|&v| v == 0.0));
        assert!(embed_caption(&[4], &table).is_err());
        // distinct rows for every id
        let rows: Vec<Vec<f64>> = (0..4).map(|i| embed_caption(&[i], &table).unwrap().data()[..2].to_vec()).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    fn time_store() -> ParamStore<f64> {
        let mut r = rng::stream(3, "test", 0);
        let mut s = ParamStore::new();
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-0.3..0.3)).collect()).unwrap()
        };
        s.insert(time_params::FC1_W, t(&[16, 12]), true, "random").unwrap();
        s.insert(time_params::FC1_B, t(&[12]), true, "random").unwrap();
        s.insert(time_params::FC2_W, t(&[12, 12]), true, "random").unwrap();
        s.insert(time_params::FC2_B, t(&[12]), true, "random").unwrap();
        s
    }

    #[test]
    fn timestep_embedding_contract() {
        let s = time_store();
        let a = timestep_embed(0.3, &s).unwrap();
        assert!(a.bit_eq(&timestep_embed(0.3, &s).unwrap()));
        assert_eq!(a.shape(), &[12]);
        assert!(timestep_embed(1.5, &s).is_err());
        // Raw features at the endpoints: cos row is all ones at 0, not at 1.
        let f0 = sinusoidal_features::<f64>(0.0, 16);
        let f1 = sinusoidal_features::<f64>(1.0, 16);
        let dist: f64 = f0.iter().zip(&f1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 1.0);
        let n = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let e0 = timestep_embed(0.0, &s).unwrap();
        let e1 = timestep_embed(1.0, &s).unwrap();
        assert!((n(&e0) - n(&e1)).abs() > 1e-3);
    }

    #[test]
    fn token_streams_validate_kept_indices() {
        let noise = Tensor::<f32>::zeros(&[8, 3]);
        let lr = Tensor::<f32>::from_vec(&[8, 3], (0..24).map(|v| v as f32).collect()).unwrap();
        let text = vec![PAD_ID; 2 * CAPTION_LEN];
        let s = TokenStreams::new(text.clone(), noise.clone(), &lr, vec![vec![1, 3], vec![0, 2]]).unwrap();
        assert_eq!(s.lr.shape(), &[4, 3]);
        assert_eq!(&s.lr.data()[..3], &[3.0, 4.0, 5.0]);
        assert_eq!(&s.lr.data()[6..9], &[12.0, 13.0, 14.0]);
        assert!(TokenStreams::new(text.clone(), noise.clone(), &lr, vec![vec![3, 1], vec![0, 2]]).is_err());
        assert!(TokenStreams::new(text.clone(), noise.clone(), &lr, vec![vec![1], vec![0, 2]]).is_err());
        assert!(TokenStreams::new(text, noise, &lr, vec![vec![4], vec![0]]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(seed in 0u64..1000, gh in 1usize..4, gw in 1usize..4, p in 1usize..5) {
            let mut r = rng::stream(seed, "test", 0);
            let (h, w) = (gh * p, gw * p);
            let img = ImageGrid::new(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap();
            let t = patchify(&img, p).unwrap();
            let back = unpatchify(&t, PatchGeometry::new(h, w, p).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}

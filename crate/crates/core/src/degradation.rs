//! Synthetic LR generation: blur → area downsample → Gaussian noise → quantize → clamp.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, CHANNELS};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Box average over each `scale × scale` block.
    Area,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Blur sigma range in HR pixels; `[0, 0]` disables blur.
    pub blur_sigma: [f64; 2],
    pub scale: usize,
    /// Noise sigma range in intensity units; `[0, 0]` disables noise.
    pub noise_sigma: [f64; 2],
    /// Number of quantization levels; 0 disables.
    pub quant_levels: u32,
    pub resample: Resample,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        // First-order Real-ESRGAN ranges; quantization stands in for JPEG.
        Self { blur_sigma: [0.2, 3.0], scale: 4, noise_sigma: [1.0 / 255.0, 30.0 / 255.0], quant_levels: 32, resample: Resample::Area }
    }
}

impl DegradationConfig {
    pub fn identity() -> Self {
        Self { blur_sigma: [0.0, 0.0], scale: 1, noise_sigma: [0.0, 0.0], quant_levels: 0, resample: Resample::Area }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.scale == 0 {
            return Err(Error::Config("degradation scale must be at least 1".into()));
        }
        if !range_ok(self.blur_sigma) || !range_ok(self.noise_sigma) {
            return Err(Error::Config("degradation ranges must be finite, non-negative and ordered".into()));
        }
        if self.quant_levels == 1 || self.quant_levels > 256 {
            return Err(Error::Config(format!("quant_levels {} not in {{0}} ∪ [2, 256]", self.quant_levels)));
        }
        Ok(())
    }
}

/// Normalized square Gaussian kernel of radius `ceil(3σ)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size() + x]
    }
}

fn gaussian_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn gaussian_kernel(sigma: f64) -> Kernel {
    let k1 = gaussian_1d(sigma);
    let n = k1.len();
    let mut weights = Vec::with_capacity(n * n);
    for a in &k1 {
        for b in &k1 {
            weights.push(a * b);
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Kernel { radius: n / 2, weights }
}

/// Separable Gaussian blur with replicate padding.
pub fn blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    let k = gaussian_1d(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    acc += kw * img.at(y, clampi(x as isize + j as isize - r, w), c) as f64;
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = ImageGrid::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    acc += kw * tmp[(clampi(y as isize + j as isize - r, h) * w + x) * CHANNELS + c];
                }
                out.set(y, x, c, acc as f32);
            }
        }
    }
    out
}

pub fn area_downsample(img: &ImageGrid, scale: usize) -> Result<ImageGrid> {
    if img.height % scale != 0 || img.width % scale != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by scale {scale}", img.height, img.width)));
    }
    if scale == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height / scale, img.width / scale);
    let mut out = ImageGrid::filled(h, w, [0.0; 3]);
    let inv = 1.0 / (scale * scale) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0f64;
                for dy in 0..scale {
                    for dx in 0..scale {
                        acc += img.at(y * scale + dy, x * scale + dx, c) as f64;
                    }
                }
                out.set(y, x, c, (acc * inv) as f32);
            }
        }
    }
    Ok(out)
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Degrades `hr` with parameters drawn from `rng`.
pub fn degrade(hr: &ImageGrid, cfg: &DegradationConfig, rng: &mut impl Rng) -> Result<ImageGrid> {
    cfg.validate()?;
    if hr.height % cfg.scale != 0 || hr.width % cfg.scale != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by scale {}", hr.height, hr.width, cfg.scale)));
    }
    let blur_sigma = draw(cfg.blur_sigma, rng);
    let noise_sigma = draw(cfg.noise_sigma, rng);
    let mut img = area_downsample(&blur(hr, blur_sigma), cfg.scale)?;
    if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img.data {
            *v = (*v as f64 + n.sample(rng)) as f32;
        }
    }
    if cfg.quant_levels >= 2 {
        let l = (cfg.quant_levels - 1) as f64;
        for v in &mut img.data {
            *v = ((v.clamp(0.0, 1.0) as f64 * l).round() / l) as f32;
        }
    }
    Ok(img.clamp01())
}

/// `degrade` on the stream keyed by `(seed, index)`.
pub fn degrade_indexed(hr: &ImageGrid, cfg: &DegradationConfig, seed: u64, index: u64) -> Result<ImageGrid> {
    degrade(hr, cfg, &mut rng::stream(seed, rng::names::DEGRADE, index))
}

//! PSNR / SSIM with center cropping, and the evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{resize_bicubic, ImageGrid, CHANNELS};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Square crop of side `size`, offset `⌊(dim − size)/2⌋` so any odd remainder
/// lands on the bottom/right.
pub fn center_crop(img: &ImageGrid, size: usize) -> Result<ImageGrid> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::Invalid(format!("crop {size} does not fit {}x{}", img.height, img.width)));
    }
    let (y0, x0) = ((img.height - size) / 2, (img.width - size) / 2);
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for y in y0..y0 + size {
        let row = (y * img.width + x0) * CHANNELS;
        data.extend_from_slice(&img.data[row..row + size * CHANNELS]);
    }
    ImageGrid::new(size, size, data)
}

fn same_dims(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at 100 dB.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data.len() as f64;
    let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn window(size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the channel-mean grayscale images over every valid window
/// position (11×11 Gaussian, σ = 1.5; smaller images use the largest odd
/// window that fits).
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = (a.height, a.width);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = window(size);
    let (ga, gb) = (a.gray(), b.gray());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..size {
                for dx in 0..size {
                    let wt = win[dy * size + dx];
                    let i = (y + dy) * w + x + dx;
                    ma += wt * ga[i];
                    mb += wt * gb[i];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..size {
                for dx in 0..size {
                    let wt = win[dy * size + dx];
                    let i = (y + dy) * w + x + dx;
                    let (da, db) = (ga[i] - ma, gb[i] - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * (da * db);
                }
            }
            total += ((2.0 * (ma * mb) + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config_digest: impl Into<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("evaluation needs at least one image".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            bicubic_psnr: mean(|r| r.bicubic_psnr),
            bicubic_ssim: mean(|r| r.bicubic_ssim),
            rows,
            config_digest: config_digest.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim,bicubic_psnr,bicubic_ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.id, r.psnr, r.ssim, r.bicubic_psnr, r.bicubic_ssim);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "images        {}\nconfig        {}\n               PSNR (dB)   SSIM\nmodel        {:>10.4} {:>8.4}\nbicubic      {:>10.4} {:>8.4}\ngain         {:>+10.4} {:>+8.4}\n",
            self.rows.len(),
            self.config_digest,
            self.mean_psnr,
            self.mean_ssim,
            self.bicubic_psnr,
            self.bicubic_ssim,
            self.mean_psnr - self.bicubic_psnr,
            self.mean_ssim - self.bicubic_ssim,
        )
    }
}

/// A held-out pair to evaluate.
pub struct EvalItem<'a> {
    pub id: String,
    pub hr: &'a ImageGrid,
    pub lr: &'a ImageGrid,
}

/// Runs `super_resolve` on every item, center-crops output and reference to
/// `crop`, and scores both the model and a bicubic upsample of the LR input.
pub fn eval_report<'a>(
    items: impl IntoIterator<Item = EvalItem<'a>>,
    crop: usize,
    config_digest: &str,
    mut super_resolve: impl FnMut(&EvalItem<'a>) -> Result<ImageGrid>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for item in items {
        let sr = super_resolve(&item)?;
        same_dims(&sr, item.hr)?;
        let bic = resize_bicubic(item.lr, item.hr.height, item.hr.width);
        let hr = center_crop(item.hr, crop)?;
        let sr = center_crop(&sr, crop)?;
        let bic = center_crop(&bic, crop)?;
        rows.push(EvalRow {
            id: item.id.clone(),
            psnr: psnr(&sr, &hr)?,
            ssim: ssim(&sr, &hr)?,
            bicubic_psnr: psnr(&bic, &hr)?,
            bicubic_ssim: ssim(&bic, &hr)?,
        });
    }
    EvalReport::from_rows(rows, config_digest)
}

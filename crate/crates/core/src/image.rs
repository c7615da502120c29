//! RGB images in `[0, 1]`, resampling, and PNG I/O.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Interleaved RGB, row-major (`data[(y * width + x) * 3 + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Channel-mean luminance, `(r + g + b) / 3`.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(CHANNELS)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Source coordinate for a destination pixel under half-pixel alignment.
fn src_coord(dst: usize, factor: f64) -> f64 {
    (dst as f64 + 0.5) / factor - 0.5
}

/// Bilinear resize to `height × width`, edges replicated.
pub fn resize_bilinear(img: &ImageGrid, height: usize, width: usize) -> ImageGrid {
    let fy = height as f64 / img.height as f64;
    let fx = width as f64 / img.width as f64;
    let mut out = ImageGrid::filled(height, width, [0.0; 3]);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..height {
        let sy = src_coord(y, fy);
        let y0 = sy.floor();
        let wy = sy - y0;
        let (ya, yb) = (clampi(y0 as isize, img.height), clampi(y0 as isize + 1, img.height));
        for x in 0..width {
            let sx = src_coord(x, fx);
            let x0 = sx.floor();
            let wx = sx - x0;
            let (xa, xb) = (clampi(x0 as isize, img.width), clampi(x0 as isize + 1, img.width));
            for c in 0..CHANNELS {
                let top = img.at(ya, xa, c) as f64 * (1.0 - wx) + img.at(ya, xb, c) as f64 * wx;
                let bot = img.at(yb, xa, c) as f64 * (1.0 - wx) + img.at(yb, xb, c) as f64 * wx;
                out.set(y, x, c, (top * (1.0 - wy) + bot * wy) as f32);
            }
        }
    }
    out
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resize to `height × width`, edges replicated, output clamped to `[0, 1]`.
pub fn resize_bicubic(img: &ImageGrid, height: usize, width: usize) -> ImageGrid {
    let fy = height as f64 / img.height as f64;
    let fx = width as f64 / img.width as f64;
    let mut out = ImageGrid::filled(height, width, [0.0; 3]);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..height {
        let sy = src_coord(y, fy);
        let y0 = sy.floor();
        let ty = sy - y0;
        let wy: [f64; 4] = [cubic(1.0 + ty), cubic(ty), cubic(1.0 - ty), cubic(2.0 - ty)];
        for x in 0..width {
            let sx = src_coord(x, fx);
            let x0 = sx.floor();
            let tx = sx - x0;
            let wx: [f64; 4] = [cubic(1.0 + tx), cubic(tx), cubic(1.0 - tx), cubic(2.0 - tx)];
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (i, wyi) in wy.iter().enumerate() {
                    let yy = clampi(y0 as isize - 1 + i as isize, img.height);
                    for (j, wxj) in wx.iter().enumerate() {
                        let xx = clampi(x0 as isize - 1 + j as isize, img.width);
                        acc += wyi * wxj * img.at(yy, xx, c) as f64;
                    }
                }
                out.set(y, x, c, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// 8-bit RGB PNG bytes.
pub fn encode_png(img: &ImageGrid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(&img.to_rgb8()).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit RGB or RGBA PNG (alpha dropped) into `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImageGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    ImageGrid::from_rgb8(h, w, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ImageGrid::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
        let bc = resize_bicubic(&img, 2, 2);
        for (a, b) in bc.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageGrid::filled(4, 4, [0.25, 0.5, 0.75]);
        let up = resize_bicubic(&img, 16, 16);
        assert!(up.data.chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
        let up = resize_bilinear(&img, 16, 16);
        assert!(up.data.chunks(3).all(|p| (p[1] - 0.5).abs() < 1e-6));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ImageGrid::from_rgb8(3, 5, &(0..45).map(|v| (v * 5) as u8).collect::<Vec<_>>()).unwrap();
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }
}

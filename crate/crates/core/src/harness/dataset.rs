//! Procedural toy corpus: one colored shape on a smooth textured background.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::degradation::{degrade_indexed, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::{write_png, ImageGrid};
use crate::prompts::{synthetic_caption, Background, Color, Position, SceneSpec, Shape};
use crate::rng;

const SUPERSAMPLE: usize = 4;

fn color_rgb(c: Color) -> [f32; 3] {
    match c {
        Color::Red => [0.9, 0.15, 0.1],
        Color::Green => [0.15, 0.8, 0.2],
        Color::Blue => [0.15, 0.25, 0.95],
        Color::Yellow => [0.95, 0.9, 0.15],
        Color::Cyan => [0.1, 0.85, 0.9],
        Color::Magenta => [0.9, 0.15, 0.85],
    }
}

fn background_rgb(b: Background) -> [f32; 3] {
    match b {
        Background::Dark => [0.12, 0.12, 0.14],
        Background::Light => [0.85, 0.85, 0.82],
        Background::Warm => [0.7, 0.45, 0.3],
        Background::Cool => [0.3, 0.45, 0.65],
    }
}

/// Shape center as a fraction of the image side.
fn anchor(p: Position) -> (f32, f32) {
    match p {
        Position::Center => (0.5, 0.5),
        Position::TopLeft => (0.3, 0.3),
        Position::TopRight => (0.3, 0.7),
        Position::BottomLeft => (0.7, 0.3),
        Position::BottomRight => (0.7, 0.7),
    }
}

fn inside(shape: Shape, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
        // Apex up, base at dy = r/2.
        Shape::Triangle => dy <= 0.5 * r && dy >= -r && dx.abs() <= (dy + r) * 0.577,
        Shape::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// Renders `spec` at `size × size` on the `scene` stream for `index`:
/// jittered position and radius, a linear gradient plus a low-frequency
/// ripple on the background, 4×4 supersampled edges, stored at 8-bit
/// precision so the PNG on disk holds exactly the same values.
pub fn render_scene(spec: &SceneSpec, size: usize, seed: u64, index: u64) -> ImageGrid {
    let mut r = rng::stream(seed, rng::names::SCENE, index);
    let s = size as f32;
    let (ay, ax) = anchor(spec.position);
    let cy = ay * s + r.random_range(-0.06..0.06) * s;
    let cx = ax * s + r.random_range(-0.06..0.06) * s;
    let radius = r.random_range(0.16..0.24) * s;
    let angle: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let grad = r.random_range(0.05..0.15);
    let ripple = r.random_range(0.0..0.04);
    let freq = r.random_range(1.0..2.5) * std::f32::consts::TAU / s;
    let phase: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let bg = background_rgb(spec.background);
    let fg = color_rgb(spec.color);
    let (ga, gb) = (angle.cos(), angle.sin());

    let mut img = ImageGrid::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let t = ((fy / s - 0.5) * ga + (fx / s - 0.5) * gb) * grad + ripple * (freq * (fy * gb - fx * ga) + phase).sin();
            let mut cover = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    cover += inside(spec.shape, py - cy, px - cx, radius) as usize;
                }
            }
            let a = cover as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for c in 0..3 {
                img.set(y, x, c, (1.0 - a) * (bg[c] + t) + a * fg[c]);
            }
        }
    }
    let img = img.clamp01();
    ImageGrid::from_rgb8(size, size, &img.to_rgb8()).expect("same dims")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Global index; keys the scene and degradation streams.
    pub index: u64,
    pub split: Split,
    pub spec: SceneSpec,
    pub hr: ImageGrid,
    /// Degraded copy on the `degrade` stream for `index`, 8-bit quantized.
    pub lr: ImageGrid,
}

impl Scene {
    pub fn id(&self) -> String {
        format!("{:05}", self.index)
    }

    pub fn caption(&self) -> Vec<u32> {
        synthetic_caption(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub train: Vec<Scene>,
    pub held_out: Vec<Scene>,
}

/// Scene spec for `index`, uniform over the whole spec space.
pub fn scene_spec(seed: u64, index: u64) -> SceneSpec {
    let all = SceneSpec::all();
    let mut r = rng::stream2(seed, rng::names::SCENE, u64::MAX, index);
    all[r.random_range(0..all.len())]
}

pub fn make_scene(index: u64, split: Split, size: usize, degradation: &DegradationConfig, seed: u64) -> Result<Scene> {
    let spec = scene_spec(seed, index);
    let hr = render_scene(&spec, size, seed, index);
    let lr = degrade_indexed(&hr, degradation, seed, index)?;
    let lr = ImageGrid::from_rgb8(lr.height, lr.width, &lr.to_rgb8())?;
    Ok(Scene { index, split, spec, hr, lr })
}

/// Indices `0..n_train` are training scenes, the next `n_held_out` held out.
pub fn generate(
    n_train: usize,
    n_held_out: usize,
    size: usize,
    degradation: &DegradationConfig,
    seed: u64,
) -> Result<Corpus> {
    degradation.validate()?;
    if size % degradation.scale != 0 {
        return Err(Error::Config(format!("image size {size} not divisible by scale {}", degradation.scale)));
    }
    let mk = |i: usize, split| make_scene(i as u64, split, size, degradation, seed);
    let train = (0..n_train).map(|i| mk(i, Split::Train)).collect::<Result<_>>()?;
    let held_out = (n_train..n_train + n_held_out).map(|i| mk(i, Split::HeldOut)).collect::<Result<_>>()?;
    Ok(Corpus { seed, train, held_out })
}

impl Corpus {
    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("id,split,index,seed,shape,color,background,position,caption,hr,lr\n");
        for sc in self.train.iter().chain(&self.held_out) {
            let ids: Vec<String> = sc.caption().iter().map(u32::to_string).collect();
            let _ = writeln!(
                s,
                "{id},{split},{},{},{},{},{},{},{},{split}/hr/{id}.png,{split}/lr/{id}.png",
                sc.index,
                self.seed,
                sc.spec.shape.word(),
                sc.spec.color.word(),
                sc.spec.background.word(),
                sc.spec.position.word(),
                ids.join(" "),
                id = sc.id(),
                split = sc.split.as_str(),
            );
        }
        s
    }

    /// Writes `{train,heldout}/{hr,lr}/NNNNN.png` and `manifest.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in [Split::Train, Split::HeldOut] {
            for sub in ["hr", "lr"] {
                let d = dir.join(split.as_str()).join(sub);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
        for sc in self.train.iter().chain(&self.held_out) {
            let base = dir.join(sc.split.as_str());
            write_png(&base.join("hr").join(format!("{}.png", sc.id())), &sc.hr)?;
            write_png(&base.join("lr").join(format!("{}.png", sc.id())), &sc.lr)?;
        }
        let m = dir.join("manifest.csv");
        std::fs::write(&m, self.manifest_csv()).map_err(|e| Error::io(&m, e))
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{InitPolicy, PsiDitConfig};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::token_codec::time_params;

/// Parameter naming scheme.
pub mod names {
    pub const PATCH_W: &str = "embed.patch.w";
    pub const PATCH_B: &str = "embed.patch.b";
    pub const POS: &str = "embed.pos";
    pub const CAPTION: &str = "embed.caption";
    pub const TEXT_POS: &str = "embed.text_pos";
    pub const FINAL_MOD_W: &str = "final.mod.w";
    pub const FINAL_MOD_B: &str = "final.mod.b";
    pub const FINAL_W: &str = "final.linear.w";
    pub const FINAL_B: &str = "final.linear.b";
    pub const LR_EMBED_W: &str = "sscm.lr_embed.w";
    pub const LR_EMBED_B: &str = "sscm.lr_embed.b";

    /// Per-stream leaves of one MMDiT block.
    pub const STREAM_LEAVES: [&str; 10] = [
        "mod.w", "mod.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w",
        "mlp.fc2.b",
    ];

    pub fn block(i: usize, stream: &str, leaf: &str) -> String {
        format!("blocks.{i}.{stream}.{leaf}")
    }

    pub fn sscm(i: usize, part: &str) -> String {
        format!("sscm.{i}.{part}")
    }

    pub fn ctrl(i: usize, part: &str) -> String {
        format!("ctrl.{i}.{part}")
    }
}

const MOD_STD: f64 = 0.02;

struct Init {
    rng: StreamRng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::from_vec(&[fan_in, fan_out], data).unwrap()
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).unwrap();
        let len = shape.iter().product();
        let data = (0..len).map(|_| n.sample(&mut self.rng) as f32).collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}

/// 2-D sin-cos table `[gh·gw, d]`: first half encodes the row, second the column.
/// Frequencies run from 1 down to 1/G (G the longer grid side) so every
/// column varies across a small grid.
fn sincos_2d(gh: usize, gw: usize, d: usize) -> Tensor {
    let half = d / 2;
    let quarter = half / 2;
    let mut data = Vec::with_capacity(gh * gw * d);
    let enc = |pos: usize, out: &mut Vec<f32>| {
        for k in 0..half {
            let i = k % quarter.max(1);
            let freq = 1.0 / (gh.max(gw) as f64).powf(i as f64 / quarter.max(1) as f64);
            let a = pos as f64 * freq;
            out.push(if k < quarter { a.sin() } else { a.cos() } as f32);
        }
    };
    for y in 0..gh {
        for x in 0..gw {
            enc(y, &mut data);
            enc(x, &mut data);
            data.resize(data.len() + (d - 2 * half), 0.0);
        }
    }
    Tensor::from_vec(&[gh * gw, d], data).unwrap()
}

fn insert_stream(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &PsiDitConfig) -> Result<()> {
    let d = cfg.width;
    let m = cfg.mlp_ratio * d;
    let mut put = |leaf: &str, t: Tensor| store.insert(format!("{prefix}.{leaf}"), t, true, "random");
    put("mod.w", init.normal(&[d, 6 * d], MOD_STD))?;
    put("mod.b", Tensor::zeros(&[6 * d]))?;
    put("qkv.w", init.xavier(d, 3 * d))?;
    put("qkv.b", Tensor::zeros(&[3 * d]))?;
    put("proj.w", init.xavier(d, d))?;
    put("proj.b", Tensor::zeros(&[d]))?;
    put("mlp.fc1.w", init.xavier(d, m))?;
    put("mlp.fc1.b", Tensor::zeros(&[m]))?;
    put("mlp.fc2.w", init.xavier(m, d))?;
    put("mlp.fc2.b", Tensor::zeros(&[d]))?;
    Ok(())
}

/// Fresh base MMDiT weights, all trainable.
pub fn init_base(cfg: &PsiDitConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init { rng: rng::stream(seed, rng::names::INIT, 0) };
    let (d, w) = (cfg.width, cfg.token_width());
    let (gh, gw) = cfg.geometry().grid();
    let mut s = ParamStore::new();
    s.insert(names::PATCH_W, init.xavier(w, d), true, "random")?;
    s.insert(names::PATCH_B, Tensor::zeros(&[d]), true, "zero")?;
    s.insert(names::POS, sincos_2d(gh, gw, d), true, "sincos")?;
    s.insert(names::CAPTION, init.normal(&[cfg.vocab_size, d], 0.5), true, "random")?;
    s.insert(names::TEXT_POS, init.normal(&[cfg.caption_len, d], 0.1), true, "random")?;
    s.insert(time_params::FC1_W, init.xavier(d, d), true, "random")?;
    s.insert(time_params::FC1_B, Tensor::zeros(&[d]), true, "zero")?;
    s.insert(time_params::FC2_W, init.xavier(d, d), true, "random")?;
    s.insert(time_params::FC2_B, Tensor::zeros(&[d]), true, "zero")?;
    for i in 0..cfg.depth {
        insert_stream(&mut s, &mut init, &format!("blocks.{i}.text"), cfg)?;
        insert_stream(&mut s, &mut init, &format!("blocks.{i}.noise"), cfg)?;
    }
    s.insert(names::FINAL_MOD_W, init.normal(&[d, 2 * d], MOD_STD), true, "random")?;
    s.insert(names::FINAL_MOD_B, Tensor::zeros(&[2 * d]), true, "zero")?;
    s.insert(names::FINAL_W, init.xavier(d, w), true, "random")?;
    s.insert(names::FINAL_B, Tensor::zeros(&[w]), true, "zero")?;
    Ok(s)
}

/// First `k` columns of a matrix, or first `k` entries of a vector.
fn leading_cols(t: &Tensor, k: usize) -> Tensor {
    if t.rank() == 1 {
        return Tensor::from_vec(&[k], t.data()[..k].to_vec()).unwrap();
    }
    let c = t.cols();
    let data: Vec<f32> = t.data().chunks(c).flat_map(|r| r[..k].iter().copied()).collect();
    Tensor::from_vec(&[t.rows(), k], data).unwrap()
}

fn check_depth(base: &ParamStore, cfg: &PsiDitConfig) -> Result<()> {
    for i in 0..cfg.depth {
        for stream in ["text", "noise"] {
            for leaf in names::STREAM_LEAVES {
                let n = names::block(i, stream, leaf);
                if !base.contains(&n) {
                    return Err(Error::MissingParam(n));
                }
            }
        }
    }
    if base.contains(&names::block(cfg.depth, "noise", "mod.w")) {
        return Err(Error::Config(format!("base has more than {} blocks", cfg.depth)));
    }
    Ok(())
}

/// SSCM parameters for every block (all trainable), initialized from `base`
/// according to `cfg.sscm_init_policy` and `cfg.enable_zero_init`.
///
/// Under either copy policy the noise-side read (its modulation shift/scale
/// and QKV) and the LR token embedding copy the base noise branch; the LR
/// stream copies the text branch (`teb_copy`) or the noise branch (`nlb_copy`).
/// With zero init enabled every merge projection starts at exactly zero.
pub fn init_sscm_from_base(base: &ParamStore, cfg: &PsiDitConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    check_depth(base, cfg)?;
    let d = cfg.width;
    let mut init = Init { rng: rng::stream(seed, rng::names::SSCM_INIT, 0) };
    let mut s = ParamStore::new();
    let policy = cfg.sscm_init_policy;
    let copy = |s: &mut ParamStore, dst: String, src: &str| -> Result<()> {
        s.insert(dst, base.tensor(src)?.clone(), true, format!("copy:{src}"))
    };

    match policy {
        InitPolicy::Random => {
            s.insert(names::LR_EMBED_W, init.xavier(cfg.token_width(), d), true, "random")?;
            s.insert(names::LR_EMBED_B, Tensor::zeros(&[d]), true, "zero")?;
        }
        InitPolicy::TebCopy | InitPolicy::NlbCopy => {
            copy(&mut s, names::LR_EMBED_W.into(), names::PATCH_W)?;
            copy(&mut s, names::LR_EMBED_B.into(), names::PATCH_B)?;
        }
    }

    for i in 0..cfg.depth {
        match policy {
            InitPolicy::Random => {
                s.insert(names::sscm(i, "noise.mod.w"), init.normal(&[d, 2 * d], MOD_STD), true, "random")?;
                s.insert(names::sscm(i, "noise.mod.b"), Tensor::zeros(&[2 * d]), true, "zero")?;
                s.insert(names::sscm(i, "noise.qkv.w"), init.xavier(d, 3 * d), true, "random")?;
                s.insert(names::sscm(i, "noise.qkv.b"), Tensor::zeros(&[3 * d]), true, "zero")?;
                insert_stream(&mut s, &mut init, &names::sscm(i, "lr"), cfg)?;
            }
            InitPolicy::TebCopy | InitPolicy::NlbCopy => {
                for leaf in ["mod.w", "mod.b"] {
                    let src = names::block(i, "noise", leaf);
                    let t = leading_cols(base.tensor(&src)?, 2 * d);
                    s.insert(names::sscm(i, &format!("noise.{leaf}")), t, true, format!("copy:{src}[..2D]"))?;
                }
                for leaf in ["qkv.w", "qkv.b"] {
                    copy(&mut s, names::sscm(i, &format!("noise.{leaf}")), &names::block(i, "noise", leaf))?;
                }
                let src_stream = if policy == InitPolicy::TebCopy { "text" } else { "noise" };
                for leaf in names::STREAM_LEAVES {
                    copy(&mut s, names::sscm(i, &format!("lr.{leaf}")), &names::block(i, src_stream, leaf))?;
                }
            }
        }
        if cfg.enable_zero_init {
            s.insert(names::sscm(i, "merge.w"), Tensor::zeros(&[d, d]), true, "zero")?;
            s.insert(names::sscm(i, "merge.b"), Tensor::zeros(&[d]), true, "zero")?;
        } else {
            s.insert(names::sscm(i, "merge.w"), init.xavier(d, d), true, "random")?;
            s.insert(names::sscm(i, "merge.b"), Tensor::zeros(&[d]), true, "zero")?;
        }
    }
    Ok(s)
}

/// ControlNet-style baseline: a trainable copy of every base block plus a
/// per-block injection map into the base noise stream (zero when
/// `cfg.enable_zero_init`).
pub fn init_controlnet(base: &ParamStore, cfg: &PsiDitConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    check_depth(base, cfg)?;
    let d = cfg.width;
    let mut init = Init { rng: rng::stream(seed, rng::names::SSCM_INIT, 1) };
    let mut s = ParamStore::new();
    for i in 0..cfg.depth {
        for stream in ["text", "noise"] {
            for leaf in names::STREAM_LEAVES {
                let src = names::block(i, stream, leaf);
                s.insert(names::ctrl(i, &format!("{stream}.{leaf}")), base.tensor(&src)?.clone(), true, format!("copy:{src}"))?;
            }
        }
        let w = if cfg.enable_zero_init { Tensor::zeros(&[d, d]) } else { init.xavier(d, d) };
        let prov = if cfg.enable_zero_init { "zero" } else { "random" };
        s.insert(names::ctrl(i, "inject.w"), w, true, prov)?;
        s.insert(names::ctrl(i, "inject.b"), Tensor::zeros(&[d]), true, "zero")?;
    }
    Ok(s)
}

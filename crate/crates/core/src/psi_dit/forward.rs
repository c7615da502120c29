use std::collections::{BTreeMap, HashMap};

use super::init::names;
use super::PsiDitConfig;
use crate::error::{Error, Result};
use crate::numeric::{Grads, Real, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::token_codec::{time_params, TokenStreams, CAPTION_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// The dual-stream base model alone.
    Base,
    /// Base plus one SSCM per block.
    PsiDit,
    /// Base plus a full trainable replica with injection maps.
    ControlNet,
}

/// One forward pass recorded on a tape.
///
/// Parameters become tape leaves on first use, looked up across `stores` in
/// order. Leaves are trainable exactly when the stored parameter is.
pub struct Forward<'a, T: Real> {
    pub tape: Tape<T>,
    cfg: &'a PsiDitConfig,
    stores: Vec<&'a ParamStore<T>>,
    leaves: HashMap<String, Var>,
}

/// Modulation chunks of one stream: shift, scale, gate for attention then MLP.
struct Mods {
    shift1: Var,
    scale1: Var,
    gate1: Option<Var>,
    shift2: Option<Var>,
    scale2: Option<Var>,
    gate2: Option<Var>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(cfg: &'a PsiDitConfig, stores: Vec<&'a ParamStore<T>>) -> Self {
        Self { tape: Tape::new(), cfg, stores, leaves: HashMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let p = self
            .stores
            .iter()
            .find_map(|s| s.get(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(p.tensor.clone(), p.trainable);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.tape.linear(x, w, b))
    }

    /// Gradients of every trainable parameter used by this pass, shaped like the parameter.
    pub fn trainable_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.leaves {
            if !self.tape.requires_grad(v) {
                continue;
            }
            let p = self.stores.iter().find_map(|s| s.get(name)).expect("leaf came from a store");
            let g = match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.len()],
            };
            out.insert(name.clone(), Tensor::from_vec(p.tensor.shape(), g).expect("grad shape"));
        }
        out
    }

    fn mods(&mut self, sc: Var, prefix: &str, chunks: usize) -> Result<Mods> {
        let d = self.cfg.width;
        let m = self.linear(sc, &format!("{prefix}.mod"))?;
        let mut c = (0..chunks).map(|k| self.tape.slice_cols(m, k * d, d));
        let shift1 = c.next().unwrap();
        let scale1 = c.next().unwrap();
        Ok(Mods { shift1, scale1, gate1: c.next(), shift2: c.next(), scale2: c.next(), gate2: c.next() })
    }

    /// Modulated norm and QKV projection for one stream.
    fn qkv(&mut self, x: Var, mods: &Mods, prefix: &str) -> Result<[Var; 3]> {
        let d = self.cfg.width;
        let h = self.tape.mod_ln(x, mods.scale1, mods.shift1);
        let qkv = self.linear(h, &format!("{prefix}.qkv"))?;
        Ok([0, 1, 2].map(|k| self.tape.slice_cols(qkv, k * d, d)))
    }

    /// Gated attention residual followed by the gated MLP residual.
    fn post(&mut self, x: Var, o: Var, mods: &Mods, prefix: &str) -> Result<Var> {
        let a = self.linear(o, &format!("{prefix}.proj"))?;
        let a = self.tape.mul_groups(a, mods.gate1.unwrap());
        let x = self.tape.add(x, a);
        let h = self.tape.mod_ln(x, mods.scale2.unwrap(), mods.shift2.unwrap());
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        let h = self.tape.mul_groups(h, mods.gate2.unwrap());
        Ok(self.tape.add(x, h))
    }

    /// Joint attention over `[a; b]` per batch item; returns the two output parts.
    fn joint(&mut self, qa: [Var; 3], qb: [Var; 3], batch: usize, na: usize, nb: usize) -> (Var, Var) {
        let [q, k, v] = [0, 1, 2].map(|i| self.tape.concat_groups(qa[i], qb[i], batch));
        let o = self.tape.attention(q, k, v, batch, self.cfg.heads);
        (self.tape.slice_groups(o, batch, 0, na), self.tape.slice_groups(o, batch, na, nb))
    }

    /// One dual-stream MMDiT block (`prefix` is `blocks.{i}` or `ctrl.{i}`).
    pub fn mmdit(&mut self, prefix: &str, text: Var, noise: Var, sc: Var, batch: usize) -> Result<(Var, Var)> {
        let (tp, np) = (format!("{prefix}.text"), format!("{prefix}.noise"));
        let mt = self.mods(sc, &tp, 6)?;
        let mn = self.mods(sc, &np, 6)?;
        let qt = self.qkv(text, &mt, &tp)?;
        let qn = self.qkv(noise, &mn, &np)?;
        let nt = self.tape.value(text).rows() / batch;
        let nn = self.tape.value(noise).rows() / batch;
        let (ot, on) = self.joint(qt, qn, batch, nt, nn);
        let text = self.post(text, ot, &mt, &tp)?;
        let noise = self.post(noise, on, &mn, &np)?;
        Ok((text, noise))
    }

    /// SSCM `i`: returns the merged noise delta and the updated LR tokens.
    pub fn sscm(&mut self, i: usize, noise: Var, lr: Var, sc: Var, batch: usize) -> Result<(Var, Var)> {
        let (np, lp) = (names::sscm(i, "noise"), names::sscm(i, "lr"));
        let mn = self.mods(sc, &np, 2)?;
        let ml = self.mods(sc, &lp, 6)?;
        let qn = self.qkv(noise, &mn, &np)?;
        let ql = self.qkv(lr, &ml, &lp)?;
        let nn = self.tape.value(noise).rows() / batch;
        let nl = self.tape.value(lr).rows() / batch;
        let (on, ol) = self.joint(qn, ql, batch, nn, nl);
        let delta = self.linear(on, &names::sscm(i, "merge"))?;
        let lr = self.post(lr, ol, &ml, &lp)?;
        Ok((delta, lr))
    }

    pub fn time_embed(&mut self, taus: &[f64]) -> Result<Var> {
        let mut w = [Var::default(); 4];
        for (slot, n) in w.iter_mut().zip([time_params::FC1_W, time_params::FC1_B, time_params::FC2_W, time_params::FC2_B]) {
            *slot = self.param(n)?;
        }
        crate::token_codec::timestep_embed_tape(&mut self.tape, taus, w)
    }

    fn embed_text(&mut self, ids: &[u32], batch: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("caption id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let table = self.param(names::CAPTION)?;
        let tpos = self.param(names::TEXT_POS)?;
        let tok = self.tape.gather_rows(table, ids.iter().map(|&t| t as usize).collect());
        let pos = self.tape.gather_rows(tpos, (0..batch).flat_map(|_| 0..CAPTION_LEN).collect());
        Ok(self.tape.add(tok, pos))
    }

    /// Patch tokens → width `D` with the shared positional table at `positions`.
    fn embed_patches(&mut self, tokens: &Tensor<T>, prefix_w: &str, prefix_b: &str, positions: Vec<usize>) -> Result<Var> {
        let x = self.tape.constant(tokens.clone());
        let w = self.param(prefix_w)?;
        let b = self.param(prefix_b)?;
        let h = self.tape.linear(x, w, b);
        let table = self.param(names::POS)?;
        let pos = self.tape.gather_rows(table, positions);
        Ok(self.tape.add(h, pos))
    }

    fn head(&mut self, noise: Var, sc: Var) -> Result<Var> {
        let d = self.cfg.width;
        let w = self.param(names::FINAL_MOD_W)?;
        let b = self.param(names::FINAL_MOD_B)?;
        let m = self.tape.linear(sc, w, b);
        let shift = self.tape.slice_cols(m, 0, d);
        let scale = self.tape.slice_cols(m, d, d);
        let h = self.tape.mod_ln(noise, scale, shift);
        let w = self.param(names::FINAL_W)?;
        let b = self.param(names::FINAL_B)?;
        Ok(self.tape.linear(h, w, b))
    }

    /// Predicted velocity `[B·Nn, P·P·C]`.
    pub fn velocity(&mut self, streams: &TokenStreams<T>, taus: &[f64], arch: Arch) -> Result<Var> {
        let cfg = self.cfg;
        let b = streams.batch;
        let nn = cfg.tokens();
        if taus.len() != b {
            return Err(Error::Shape(format!("{} flow times for batch {b}", taus.len())));
        }
        if streams.noise.shape() != [b * nn, cfg.token_width()] {
            return Err(Error::Shape(format!(
                "noise tokens {:?}, expected [{}, {}]",
                streams.noise.shape(),
                b * nn,
                cfg.token_width()
            )));
        }
        if streams.lr.cols() != cfg.token_width() && !streams.lr.is_empty() {
            return Err(Error::Shape(format!("LR token width {}", streams.lr.cols())));
        }
        if streams.lr_kept.iter().any(|k| k.last().is_some_and(|&i| i >= nn)) {
            return Err(Error::Invalid("kept LR index outside the token grid".into()));
        }

        let c = self.time_embed(taus)?;
        let sc = self.tape.silu(c);
        let mut text = self.embed_text(&streams.text, b)?;
        let all_pos: Vec<usize> = (0..b).flat_map(|_| 0..nn).collect();
        let mut noise = self.embed_patches(&streams.noise, names::PATCH_W, names::PATCH_B, all_pos)?;

        match arch {
            Arch::Base => {
                for i in 0..cfg.depth {
                    (text, noise) = self.mmdit(&format!("blocks.{i}"), text, noise, sc, b)?;
                }
            }
            Arch::PsiDit => {
                let kept_pos: Vec<usize> = streams.lr_kept.iter().flatten().copied().collect();
                let lr_tokens = lr_matrix(streams, cfg.token_width());
                let mut lr = self.embed_patches(&lr_tokens, names::LR_EMBED_W, names::LR_EMBED_B, kept_pos)?;
                for i in 0..cfg.depth {
                    let (delta, lr_next) = self.sscm(i, noise, lr, sc, b)?;
                    lr = lr_next;
                    noise = self.tape.add(noise, delta);
                    (text, noise) = self.mmdit(&format!("blocks.{i}"), text, noise, sc, b)?;
                }
            }
            Arch::ControlNet => {
                if self.stores.iter().any(|s| s.contains(&names::ctrl(cfg.depth, "inject.w"))) {
                    return Err(Error::Config(format!("replica has more than {} blocks", cfg.depth)));
                }
                // Masked LR positions contribute nothing: kept tokens are scattered onto a zero grid.
                let kept_pos: Vec<usize> = streams.lr_kept.iter().flatten().copied().collect();
                let lr_tokens = lr_matrix(streams, cfg.token_width());
                let lr = self.embed_patches(&lr_tokens, names::PATCH_W, names::PATCH_B, kept_pos)?;
                let rows: Vec<usize> = streams
                    .lr_kept
                    .iter()
                    .enumerate()
                    .flat_map(|(bi, k)| k.iter().map(move |&i| bi * nn + i))
                    .collect();
                let lr_grid = self.tape.scatter_rows(lr, rows, b * nn);
                let mut ctrl_text = text;
                let mut ctrl_noise = self.tape.add(noise, lr_grid);
                for i in 0..cfg.depth {
                    (ctrl_text, ctrl_noise) = self.mmdit(&format!("ctrl.{i}"), ctrl_text, ctrl_noise, sc, b)?;
                    let inj = self.linear(ctrl_noise, &names::ctrl(i, "inject"))?;
                    noise = self.tape.add(noise, inj);
                    (text, noise) = self.mmdit(&format!("blocks.{i}"), text, noise, sc, b)?;
                }
            }
        }
        let _ = text;
        self.head(noise, sc)
    }
}

fn lr_matrix<T: Real>(streams: &TokenStreams<T>, width: usize) -> Tensor<T> {
    if streams.lr.is_empty() {
        Tensor::zeros(&[0, width])
    } else {
        streams.lr.clone()
    }
}

fn as_rank3<T: Real>(t: Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let (r, c) = (t.rows(), t.cols());
    t.reshape(&[batch, r / batch, c])
}

fn check_rank3<T: Real>(t: &Tensor<T>, what: &str, batch: usize, d: usize) -> Result<usize> {
    match t.shape() {
        [b, n, dd] if *b == batch && *dd == d => Ok(*n),
        s => Err(Error::Shape(format!("{what} has shape {s:?}, expected [{batch}, N, {d}]"))),
    }
}

/// Cond is the time embedding `[B, D]`; text/noise are `[B, Nt, D]` / `[B, Nn, D]`.
/// Returns the updated `(text, noise)` tokens of base block `index`.
pub fn mmdit_block<T: Real>(
    cfg: &PsiDitConfig,
    params: &ParamStore<T>,
    index: usize,
    text: &Tensor<T>,
    noise: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = cond.rows();
    check_rank3(text, "text", b, cfg.width)?;
    check_rank3(noise, "noise", b, cfg.width)?;
    if cond.shape() != [b, cfg.width] {
        return Err(Error::Shape(format!("cond has shape {:?}", cond.shape())));
    }
    let mut f = Forward::new(cfg, vec![params]);
    let (t, n, c) = (f.tape.constant(text.clone()), f.tape.constant(noise.clone()), f.tape.constant(cond.clone()));
    let sc = f.tape.silu(c);
    let (t, n) = f.mmdit(&format!("blocks.{index}"), t, n, sc, b)?;
    Ok((as_rank3(f.tape.value(t).clone(), b)?, as_rank3(f.tape.value(n).clone(), b)?))
}

/// SSCM `index` on `[B, Nn, D]` noise and `[B, Nl', D]` LR tokens.
/// Returns `(noise_delta, lr_out)`.
pub fn sscm_block<T: Real>(
    cfg: &PsiDitConfig,
    params: &ParamStore<T>,
    index: usize,
    noise: &Tensor<T>,
    lr: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = cond.rows();
    check_rank3(noise, "noise", b, cfg.width)?;
    check_rank3(lr, "lr", b, cfg.width)?;
    let mut f = Forward::new(cfg, vec![params]);
    let (n, l, c) = (f.tape.constant(noise.clone()), f.tape.constant(lr.clone()), f.tape.constant(cond.clone()));
    let sc = f.tape.silu(c);
    let (delta, lr) = f.sscm(index, n, l, sc, b)?;
    Ok((as_rank3(f.tape.value(delta).clone(), b)?, as_rank3(f.tape.value(lr).clone(), b)?))
}

fn run<T: Real>(
    cfg: &PsiDitConfig,
    stores: Vec<&ParamStore<T>>,
    streams: &TokenStreams<T>,
    taus: &[f64],
    arch: Arch,
) -> Result<Tensor<T>> {
    let mut f = Forward::new(cfg, stores);
    let v = f.velocity(streams, taus, arch)?;
    let out = f.tape.value(v).clone();
    out.ensure_finite("velocity")?;
    as_rank3(out, streams.batch)
}

/// Velocity `[B, Nn, P·P·C]` from base + SSCM parameters.
pub fn psi_dit_forward<T: Real>(
    cfg: &PsiDitConfig,
    streams: &TokenStreams<T>,
    taus: &[f64],
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(cfg, vec![params], streams, taus, Arch::PsiDit)
}

/// Velocity from the base model alone; LR tokens are ignored.
pub fn base_forward<T: Real>(
    cfg: &PsiDitConfig,
    streams: &TokenStreams<T>,
    taus: &[f64],
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(cfg, vec![params], streams, taus, Arch::Base)
}

pub fn controlnet_forward<T: Real>(
    cfg: &PsiDitConfig,
    streams: &TokenStreams<T>,
    taus: &[f64],
    base: &ParamStore<T>,
    replica: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(cfg, vec![base, replica], streams, taus, Arch::ControlNet)
}

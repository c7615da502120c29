//! The triple-flow diffusion transformer.
//!
//! A frozen dual-stream MMDiT (text + noisy image tokens, joint attention over
//! the token-concatenated streams) is extended by one trainable Separable
//! Stream Control Module per block. Each SSCM attends jointly over noise and
//! LR tokens; its noise-side output is projected by a merge layer and added
//! to the block's noise input, and its LR-side output feeds the next SSCM.
//!
//! A ControlNet-style baseline (full trainable replica fed with summed
//! noise + LR tokens, injecting through zero-initialized maps) is provided
//! for comparison.

mod forward;
mod init;

use serde::{Deserialize, Serialize};

pub use crate::params::{count_params, Param, ParamStore};
pub use forward::{
    base_forward, controlnet_forward, mmdit_block, psi_dit_forward, sscm_block, Arch, Forward,
};
pub use init::{init_base, init_controlnet, init_sscm_from_base, names};

use crate::error::{Error, Result};
use crate::token_codec::{PatchGeometry, CAPTION_LEN};

/// How SSCM weights are initialized from the pretrained base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Fresh seeded init.
    Random,
    /// LR stream copies the text-embedding branch.
    TebCopy,
    /// LR stream copies the noisy-latent branch.
    NlbCopy,
}

impl InitPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitPolicy::Random => "random",
            InitPolicy::TebCopy => "teb_copy",
            InitPolicy::NlbCopy => "nlb_copy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitPolicy::Random),
            "teb_copy" => Ok(InitPolicy::TebCopy),
            "nlb_copy" => Ok(InitPolicy::NlbCopy),
            other => Err(Error::Config(format!("unknown SSCM init policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiDitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub mlp_ratio: usize,
    pub enable_zero_init: bool,
    pub sscm_init_policy: InitPolicy,
}

impl Default for PsiDitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch: 4,
            image_size: 32,
            vocab_size: 32,
            caption_len: CAPTION_LEN,
            mlp_ratio: 4,
            enable_zero_init: true,
            sscm_init_policy: InitPolicy::NlbCopy,
        }
    }
}

impl PsiDitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, width, heads and mlp_ratio must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 2 != 0 {
            return bad("width must be even for the sinusoidal time features".into());
        }
        if self.caption_len != CAPTION_LEN {
            return bad(format!("caption_len must be {CAPTION_LEN}"));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must hold at least the pad id and one word".into());
        }
        PatchGeometry::new(self.image_size, self.image_size, self.patch)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry { height: self.image_size, width: self.image_size, patch: self.patch }
    }

    pub fn tokens(&self) -> usize {
        self.geometry().tokens()
    }

    pub fn token_width(&self) -> usize {
        self.geometry().token_width()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[cfg(test)]
mod tests;

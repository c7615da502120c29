//! Triple-flow diffusion transformer for blind super-resolution, at desk scale.

pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod image;
pub mod mask_curriculum;
pub mod metrics;
pub mod numeric;
pub mod params;
pub mod prompts;
pub mod psi_dit;
pub mod rng;
pub mod token_codec;

pub use error::{Error, Result};

/// The guide in `book/`, compiled as doctests so its snippets stay current.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    pub mod tokens {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    pub mod architecture {}
    #[doc = include_str!("../../../book/src/masking.md")]
    pub mod masking {}
    #[doc = include_str!("../../../book/src/degradation.md")]
    pub mod degradation {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    pub mod harness {}
}

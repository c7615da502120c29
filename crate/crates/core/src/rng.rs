//! Named, seeded random streams.
//!
//! A stream is identified by `(seed, name, index)`, so results never depend
//! on how many draws other consumers made or on batch-assembly order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod names {
    pub const INIT: &str = "init";
    pub const SSCM_INIT: &str = "sscm-init";
    pub const BATCH: &str = "batch";
    pub const TAU: &str = "tau";
    pub const NOISE: &str = "noise";
    pub const MASK_RATIO: &str = "mask-ratio";
    pub const MASK_INDICES: &str = "mask-indices";
    pub const DEGRADE: &str = "degrade";
    pub const SCENE: &str = "scene";
    pub const SAMPLE: &str = "sample";
    pub const CAPTION_DROP: &str = "caption-drop";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The stream for `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(name.as_bytes())));
    rng.set_stream(index);
    rng
}

/// A stream keyed by two indices, e.g. `(step, batch slot)`.
pub fn stream2(seed: u64, name: &str, a: u64, b: u64) -> StreamRng {
    stream(seed, name, splitmix(a).wrapping_add(b))
}

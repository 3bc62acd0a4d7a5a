//! Seed derivation. Every random stream in the library is a ChaCha8 generator
//! keyed by a seed derived from the run seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels for [`derive`].
pub mod stream {
    pub const BACKBONE_VISION: u64 = 1;
    pub const BACKBONE_TEXT: u64 = 2;
    pub const FRG: u64 = 3;
    pub const RHO: u64 = 4;
    pub const PROJECTOR: u64 = 5;
    pub const EPISODE: u64 = 6;
    pub const ORDER: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const MOCO: u64 = 9;
    pub const AUGMIX: u64 = 10;
    pub const SPLIT: u64 = 11;
    pub const RUN: u64 = 12;
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed for `(seed, stream)`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(stream.wrapping_mul(0xd6e8_feb8_6659_fd93)))
}

/// Child seed from a path of labels, e.g. `(run, epoch, sample)`.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| derive(s, p))
}

pub fn rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

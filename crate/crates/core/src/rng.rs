//! Deterministic seed derivation. Every generator in the crate draws from a
//! `ChaCha8Rng` seeded from `(run seed, stream, index)` so that results do not
//! depend on batch composition or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.rotate_left(17)) ^ index.rotate_left(41))
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Named streams so different consumers of one run seed never collide.
pub mod stream {
    pub const RENDER: u64 = 1;
    pub const DEGRADE: u64 = 2;
    pub const IQA_ITEM: u64 = 3;
    pub const DIFFUSION_ITEM: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const GUIDE: u64 = 8;
    pub const ANCHOR: u64 = 9;
    pub const PROBE: u64 = 10;
    pub const EVAL: u64 = 11;
}

//! Seed streams.
//!
//! Each random draw in the crate comes from a ChaCha8 generator keyed by
//! `(seed, tag, a, b)`, so a draw depends only on its logical position
//! (iteration, sample index, ...) and not on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags give independent streams for the same seed.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const PRIOR: u64 = 4;
    pub const RENOISE: u64 = 5;
    pub const PROJECTION: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const INIT: u64 = 8;
    pub const POOL: u64 = 9;
    pub const TRIAL: u64 = 10;
    pub const BELLMAN: u64 = 11;
    pub const EVAL: u64 = 12;
}

pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

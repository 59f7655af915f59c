//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed, so adding draws in one place never shifts another.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream identifiers.
pub mod stream {
    pub const POLICY_INIT: u64 = 1;
    pub const BC_BATCH: u64 = 2;
    pub const TUPLE_BATCH: u64 = 3;
    pub const DENSITY_P: u64 = 4;
    pub const DENSITY_T: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DEMOS: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    pub const SAMPLE: u64 = 9;
    pub const FLOW_INIT: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

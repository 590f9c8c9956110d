//! Seed derivation. Every stochastic stream in the engine is a ChaCha8
//! generator keyed by a master seed and a short path of integers, so any
//! worker can rebuild its randomness without shared state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream path into a new 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream labels, kept distinct so no two consumers share a generator.
pub mod label {
    pub const NOISE: u64 = 1;
    pub const TASK: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const INNER: u64 = 4;
    pub const POOL: u64 = 5;
    pub const LOSS_INIT: u64 = 6;
    pub const TEST: u64 = 7;
}

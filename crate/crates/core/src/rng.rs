//! Seeded random streams.
//!
//! Every stream in a run is derived from the master seed plus a tag path, so
//! no two consumers share state and the result of any component does not
//! depend on how many draws another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

/// Stream tags. Values are part of the determinism contract; never renumber.
pub mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const VAL_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const LANE_DATA: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const BACKBONE_INIT: u64 = 6;
    pub const PRETRAIN: u64 = 7;
    pub const HEAD_INIT: u64 = 8;
    pub const CLIENT: u64 = 9;
    pub const SERVER_EVAL: u64 = 10;
    pub const CALIBRATION: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of tags into an independent 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &tag| splitmix(acc ^ splitmix(tag)))
}

pub fn stream_rng(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}

pub fn normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw from `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut SimRng) -> f64 {
    use rand::RngCore;
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut SimRng, n: usize) -> usize {
    use rand::Rng;
    rng.random_range(0..n)
}

/// Fisher–Yates shuffle driven by `rng`.
pub fn shuffle<T>(rng: &mut SimRng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

//! Counter-based seeding.
//!
//! Every random stream in the crate is derived from an explicit tuple of
//! integers (seed, stream tag, index...) so results never depend on call
//! order or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stable hash of a string, for per-name streams.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0x243f_6a88_85a3_08d3, |acc, b| mix64(acc ^ b as u64))
}

pub fn stream(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags keep independent uses of one seed apart.
pub mod tag {
    pub const DEGRADE: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const R1_NOISE: u64 = 5;
    pub const PROJECTIONS: u64 = 6;
    pub const MISMATCH: u64 = 7;
}

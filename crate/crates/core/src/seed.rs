//! Counter-based seed splitting: every random stream is derived from one 64-bit root seed
//! and a stream index, so parallel workers stay reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed number `index` of `root`.
pub fn split(root: u64, index: u64) -> u64 {
    mix64(root ^ mix64(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

pub fn rng(root: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split(root, index))
}

/// Stream indices reserved for the different consumers of a root seed.
pub mod streams {
    pub const EPISODES: u64 = 1 << 32;
    pub const RESTARTS: u64 = 2 << 32;
    pub const PPO: u64 = 3 << 32;
    pub const INIT: u64 = 4 << 32;
}

//! Seed mixing helpers. Every stream in the system is a `ChaCha8Rng`
//! keyed by a splitmix-mixed 64-bit seed so that nearby seeds decorrelate.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; also used for the train/test hash-bucket split.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine two seeds into one stream key.
pub fn mix2(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed))
}

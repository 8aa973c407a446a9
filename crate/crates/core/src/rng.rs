//! Deterministic RNG construction.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! user seed mixed with a purpose tag, so that generation order never
//! depends on thread scheduling or batch composition.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of the same user seed decorrelated.
pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const DATA: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const DROPOUT: u64 = 0x04;
    pub const SPLIT: u64 = 0x05;
}

/// splitmix64 finalizer; decorrelates nearby seeds.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a seed with any number of stream/index words.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut acc = mix64(seed);
    for &w in words {
        acc = mix64(acc ^ w);
    }
    acc
}

/// A ChaCha8 generator for (seed, words).
pub fn chacha(seed: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, words))
}

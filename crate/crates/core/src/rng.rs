//! Seeded generators. Every random draw in the crate goes through here so runs
//! are reproducible from a single `u64` seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a (seed, purpose, index) triple.
pub fn stream(seed: u64, purpose: u64, index: u64) -> Rng {
    let mut s = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s = s.wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    s ^= s >> 31;
    ChaCha8Rng::seed_from_u64(s)
}

//! Deterministic RNG stream derivation.
//!
//! Every random choice in an experiment is drawn from a ChaCha8 stream whose
//! seed is derived from the experiment seed by key splitting, so runs are
//! reproducible regardless of thread scheduling: each (batch item, layer,
//! head) owns its own stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a child seed from a parent seed and an integer key (SplitMix64 mix).
pub fn derive_seed(parent: u64, key: u64) -> u64 {
    let mut z = parent ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level key split: `derive_seed(derive_seed(parent, a), b)`.
pub fn derive_seed2(parent: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(parent, a), b)
}

/// A fresh ChaCha8 stream for the given derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Deterministic seed derivation.
//!
//! Every stochastic operation takes an explicit seed and owns its RNG stream,
//! so runs are reproducible bit-for-bit regardless of scheduling. Sub-streams
//! are derived from a master seed with a splitmix64 mix, keyed by a tag so
//! that different purposes (paths, steps, trials) never share a stream.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed from `seed` for the purpose named by `tag`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Two-level derivation, e.g. (trial, step).
pub fn derive2(seed: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive(derive(seed, tag_a), tag_b)
}

/// The RNG used throughout: small state, fast, identical streams everywhere.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

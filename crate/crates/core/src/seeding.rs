//! Deterministic seed derivation.
//!
//! Every randomized operation draws from a stream seeded by mixing a master
//! seed with structural coordinates (identity index, image index, epoch, ...).
//! This makes generation order-independent: a sample's stream depends only on
//! its coordinates, never on how many samples were drawn before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-avalanche mix of a 64-bit word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a coordinate path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = mix64(master);
    for &part in path {
        state = mix64(state ^ mix64(part));
    }
    state
}

/// A ChaCha stream at a derived coordinate.
pub fn rng_at(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

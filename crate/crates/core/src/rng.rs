//! Seed derivation so every pipeline stage draws from its own stream.
//!
//! One user-facing 64-bit seed fans out to named stages; the same
//! (seed, label) pair always yields the same generator, so stages are
//! independently reproducible regardless of execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a stage seed from a base seed and a stage label.
///
/// FNV-1a over the label bytes, mixed with the base through a splitmix64
/// finalizer. Stable across platforms.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

/// Seeded generator for a named stage.
pub fn rng_for(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

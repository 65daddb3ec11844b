//! Deterministic seeding helpers.
//!
//! Every random choice in the crate flows from a `u64` seed through
//! `ChaCha8Rng`, a counter-based stream cipher RNG whose output is identical
//! across platforms. Sub-seeds for independent components (dataset scenes,
//! training, dropout) are derived by mixing a label into the master seed so
//! that streams never alias.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed for a named component from a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut state = splitmix64(master ^ 0xa076_1d64_78bd_642f);
    for &byte in label.as_bytes() {
        state = splitmix64(state ^ u64::from(byte));
    }
    state
}

/// Build the crate's standard RNG from a seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

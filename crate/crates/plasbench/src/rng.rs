//! Seeding scheme: every run is replayable from one master integer.
//!
//! Purpose-specific seeds (data generation, parameter init, batch order, ...)
//! are derived from the master seed by folding an FNV-1a hash of a text tag
//! into a SplitMix64 step. The generator itself is ChaCha8, which has a
//! portable, version-stable stream for a given 64-bit seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The PRNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// One SplitMix64 output step.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a purpose-specific seed from `master` and a text tag.
pub fn derive(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a(tag.as_bytes()))
}

/// Derives a seed from `master`, a text tag, and an index (seed number,
/// group id, phase number, ...).
pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(master, tag).wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

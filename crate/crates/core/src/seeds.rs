//! Counter-based seed derivation.
//!
//! All randomness in a run flows from one master seed. Sub-components derive
//! their own streams from `(master, tag, counter)` so that adding or removing
//! one consumer never shifts the stream seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the sub-stream named `tag`.
pub fn child(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a(tag))
}

/// Seed for the `n`-th element of the sub-stream named `tag`.
pub fn child_n(master: u64, tag: &str, n: u64) -> u64 {
    splitmix64(child(master, tag) ^ splitmix64(n.wrapping_add(1)))
}

/// Deterministic RNG for a derived seed. ChaCha8 streams are identical
/// across platforms, which the reproducibility contracts rely on.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` standard-normal draws from a fresh RNG for `seed`.
pub fn standard_normal(seed: u64, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

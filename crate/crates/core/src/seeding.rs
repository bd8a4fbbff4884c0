//! Deterministic seed derivation: all randomness flows from a single master
//! seed through tagged streams, so parallel rollout collection stays
//! reproducible regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from (master, stream tag, counter).
pub fn derive(master: u64, tag: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(master ^ tag.wrapping_mul(0xa0761d6478bd642f)) ^ counter)
}

/// RNG for one logical stream.
pub fn rng(master: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, counter))
}

/// Stream tags used across the crate.
pub mod tags {
    pub const INIT_STATE: u64 = 1;
    pub const FIT_SHUFFLE: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const REPAIR_ROLLOUT: u64 = 4;
    pub const EVAL_ROLLOUT: u64 = 5;
    pub const AUDIT: u64 = 6;
}

//! Deterministic RNG plumbing. Every random decision derives its stream from
//! the run seed plus a purpose tag and indices, so any part of a run can be
//! replayed bit-identically without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SAMPLE: u64 = 2;
pub const TAG_SYNTH: u64 = 3;
pub const TAG_GRADCHECK: u64 = 4;
pub const TAG_SPLIT: u64 = 5;
pub const TAG_SHUFFLE: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the parts into one 64-bit stream key. Order matters.
pub fn derive(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

pub fn seed_rng(parts: &[u64]) -> Prng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

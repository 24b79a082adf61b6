//! Named random streams.
//!
//! Every source of randomness is derived from one experiment seed, split into
//! independent ChaCha streams so that changing how much randomness one part of
//! the pipeline consumes never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    AugmentLabeled = 3,
    AugmentUnlabeled = 4,
    BatchLabeled = 5,
    BatchUnlabeled = 6,
    Split = 7,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    substream(seed, which, 0)
}

pub fn substream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}

/// 64-bit FNV-1a, mixed with a seed. Used for reproducible split assignment.
pub fn stable_hash(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche (splitmix64 finalizer)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

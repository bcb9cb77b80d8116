//! Per-purpose seed derivation.
//!
//! Every random stream in an experiment comes from the single experiment seed.
//! The seed keys a ChaCha8 generator and the (purpose, round) pair selects one
//! of its independent streams, so consumers never share or overlap draws:
//!
//! ```text
//! stream = (round << 8) | purpose
//! ```
//!
//! Round 0 is used for setup purposes (dataset, initial pool, initial classifier).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Dataset = 0,
    PoolInit = 1,
    DetectorInit = 2,
    DetectorTrain = 3,
    ClassifierInit = 4,
    ClassifierTrain = 5,
    Sampler = 6,
    Dropout = 7,
}

pub fn rng_for(seed: u64, purpose: Purpose, round: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 8) | purpose as u64);
    rng
}

/// Derives a child seed for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: Purpose, round: u32) -> u64 {
    rng_for(seed, purpose, round).next_u64()
}

/// Mixes an index into a seed (splitmix64 finalizer). Used for per-example
/// and per-sample dropout seeds.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Deterministic random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams of different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Noise = 3,
    Data = 4,
    Baseline = 5,
}

/// Independent generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

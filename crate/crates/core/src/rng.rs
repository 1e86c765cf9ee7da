//! Seeded random streams.
//!
//! Every stochastic routine in the crate takes an explicit generator; there
//! is no global RNG. Training loops derive one independent stream per step
//! index so that a run resumed from a checkpoint at step `k` consumes exactly
//! the same randomness as the unbroken run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream)`; streams with different indices
/// are decorrelated even for adjacent seeds.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(splitmix64(stream)))
}

/// Top-level stream for a command or test.
pub fn seed_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

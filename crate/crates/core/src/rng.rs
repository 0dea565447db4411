//! Seeded random number generation.
//!
//! Every stochastic routine takes an explicit `u64` seed. Per-item streams
//! (one per fibre, one per restart) are derived with [`sub_seed`] so results
//! do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type HdmRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> HdmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `seed` mixed with a stream index.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> HdmRng {
    rng_from_seed(sub_seed(seed, stream))
}

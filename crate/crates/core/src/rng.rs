//! Seeding helpers. Every stochastic routine takes a `u64` seed and builds its
//! own generator, so results never depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based child seed: `mix(mix(master) ^ mix(stream << 32 | counter))`.
///
/// `stream` separates independent uses (covariates, outcomes, removal, ...)
/// and `counter` indexes replicates, so replicate `r` sees the same seeds no
/// matter which worker runs it.
pub fn derive_seed(master: u64, stream: u32, counter: u32) -> u64 {
    mix(mix(master) ^ mix(((stream as u64) << 32) | counter as u64))
}

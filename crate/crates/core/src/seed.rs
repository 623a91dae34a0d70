//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of stream identifiers.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

// Stream tags.
pub const ENCODER_INIT: u64 = 1;
pub const CLASSIFIER_INIT: u64 = 2;
pub const CLUSTERING: u64 = 3;
pub const BATCHES: u64 = 4;
pub const SYNTH_SOURCE: u64 = 5;
pub const SYNTH_TARGET: u64 = 6;
pub const SPLIT: u64 = 7;

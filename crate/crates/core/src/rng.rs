//! Seed derivation. Every random stream in the toolkit is a ChaCha8 stream
//! keyed by a tuple of integers mixed down from the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into derived seeds so that e.g. augmentation and
/// dropout for the same sample never share a stream.
pub mod purpose {
    pub const AUGMENT: u64 = 0xA11;
    pub const MODEL: u64 = 0xB22;
    pub const SHUFFLE: u64 = 0xC33;
    pub const INIT: u64 = 0xD44;
    pub const SPLIT: u64 = 0xE55;
    pub const TOY: u64 = 0xF66;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered tuple of integers into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

//! Seed derivation.
//!
//! Every random stream in the toolkit is a ChaCha8 generator seeded from a
//! base seed and a (stream, index) pair, so experiments replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATA: u64 = 1;
pub const STREAM_TEST_KNOWN: u64 = 2;
pub const STREAM_TEST_NEW: u64 = 3;
pub const STREAM_INIT_TRAIN: u64 = 4;
pub const STREAM_PARTITION: u64 = 5;
pub const STREAM_UPDATE: u64 = 6;
pub const STREAM_RANDOM_METRIC: u64 = 7;
pub const STREAM_SCENE: u64 = 8;
pub const STREAM_MC: u64 = 9;
pub const STREAM_DISCOVERY: u64 = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into a new seed.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream.rotate_left(17)) ^ index.rotate_left(41))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    rng(derive(base, stream, index))
}

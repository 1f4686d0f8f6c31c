//! Seed derivation.
//!
//! Every random consumer gets its own 64-bit seed derived from the run seed,
//! a stream tag and an index, so any episode or step can be regenerated on
//! its own without replaying the ones before it:
//!
//! ```text
//! derive(base, stream, index) = splitmix64(splitmix64(base ^ stream) ^ index)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_EPISODE: u64 = 0x4550_4953_4f44_4531; // "EPISODE1"
pub const STREAM_RESAMPLE: u64 = 0x5245_5341_4d50_4c45;
pub const STREAM_NOISE: u64 = 0x4e4f_4953_4531_3233;
pub const STREAM_REGULAR: u64 = 0x5245_4755_4c41_5231;
pub const STREAM_INIT: u64 = 0x494e_4954_5041_5231;
pub const STREAM_EVAL: u64 = 0x4556_414c_5541_5445;
pub const STREAM_SPLIT: u64 = 0x5350_4c49_5443_4c53;
pub const STREAM_GENERATE: u64 = 0x5348_4150_4553_3031;

/// The splitmix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

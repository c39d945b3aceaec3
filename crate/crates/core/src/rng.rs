//! Counter-based random streams: every stream is a pure function of a key
//! tuple, so results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a key tuple into one 64-bit seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x6A09_E667_F3BC_C908, |h, &k| splitmix64(h ^ splitmix64(k)))
}

pub fn stream(keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(keys))
}

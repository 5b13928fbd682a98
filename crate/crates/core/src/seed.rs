//! Named seed streams.
//!
//! A single global seed is fanned out into independent streams keyed by a
//! name and an index, so that per-record work can run in any order and still
//! consume the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the seed of stream `(name, index)` under `parent`.
pub fn derive(parent: u64, name: &str, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(fnv1a(name.as_bytes()) ^ splitmix64(index)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(parent: u64, name: &str, index: u64) -> ChaCha8Rng {
    rng(derive(parent, name, index))
}

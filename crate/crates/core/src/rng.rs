//! Keyed random draws.
//!
//! Every draw is addressed by a key, so results do not depend on the order
//! in which work is scheduled. Backed by ChaCha8, whose stream id and word
//! position give random access into the keystream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A sequential generator for the stream identified by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed));
    rng.set_stream(stream);
    rng
}

/// Uniform `[0, 1)` value addressed by `(seed, scene, pillar, row)`.
pub fn keyed_uniform(seed: u64, scene: u64, pillar: u64, row: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, scene));
    rng.set_stream(pillar);
    rng.set_word_pos(row as u128 * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

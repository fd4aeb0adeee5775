//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate flows from an explicit seed. Streams for
//! individual work items (an example in an epoch, an object being generated)
//! are derived from the item's identity rather than from draw order, so
//! results do not depend on batch composition or processing order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stream keyed by up to three identity words under a global seed.
pub fn stream(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&mix(seed).to_le_bytes());
    key[8..16].copy_from_slice(&mix(a ^ 0xa076_1d64_78bd_642f).to_le_bytes());
    key[16..24].copy_from_slice(&mix(b ^ 0xe703_7ed1_a0b4_28db).to_le_bytes());
    key[24..32].copy_from_slice(&mix(c ^ 0x8ebc_6af0_9c88_c6e3).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Augmentation stream for one example in one epoch.
pub fn example_stream(seed: u64, image_id: u64, epoch: u64) -> ChaCha8Rng {
    stream(seed, image_id, epoch, 0x4155_47) // "AUG"
}

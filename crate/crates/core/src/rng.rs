//! Counter-derived random streams.
//!
//! Every consumer of randomness derives its own stream from the master seed,
//! a domain tag, and an index (sample id, epoch, class). Streams are
//! independent of execution order and thread count, which is what makes
//! whole runs bitwise reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The per-purpose stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive the stream identified by `(master_seed, domain, index)`.
///
/// The triple is hashed into a ChaCha key, so any two distinct triples give
/// unrelated streams and the same triple always gives the same stream.
pub fn stream(master_seed: u64, domain: &str, index: u64) -> Stream {
    let mut state = master_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ fnv1a(domain.as_bytes()).rotate_left(17)
        ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

//! Deterministic random streams and content hashes.
//!
//! All randomness flows through ChaCha8 (`rand_chacha::ChaCha8Rng`), a
//! counter-based generator with a 64-bit stream selector. A run has one base
//! seed; each component draws from its own stream, addressed by a
//! [`Stream`] tag and a 48-bit index (epoch, batch, worker, ...). Streams
//! never overlap, so adding draws in one component cannot shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Generator = 1,
    Split = 2,
    Init = 3,
    Shuffle = 4,
    Augment = 5,
    Probe = 6,
    TestSet = 7,
    Theory = 8,
    Aux = 9,
}

const INDEX_BITS: u32 = 48;

/// Generator for `(seed, stream, index)`.
pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}

/// SplitMix64 finaliser; mixes two words into a derived seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

//! Deterministic seed derivation and content hashing.
//!
//! Every stochastic component is keyed through these helpers so that a
//! run is a pure function of its config and the per-iteration seeds can
//! be reconstructed on resume without replaying RNG state.

use sha2::{Digest, Sha256};

/// SplitMix64 finalizer: a cheap, well-mixed 64-bit hash step.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a root seed with distinguishing values into one 64-bit seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(root);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 8 bytes of SHA-256 of the string, as a little-endian u64.
/// Stable across platforms and releases, unlike `DefaultHasher`.
pub fn hash64_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

//! Stable seed derivation so every random draw in the pipeline is keyed by
//! (base seed, purpose, epoch/sample coordinates) rather than call order.

use sha2::{Digest, Sha256};

pub fn derive(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// FNV-1a over a string, for keying seeds by sample id or class name.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

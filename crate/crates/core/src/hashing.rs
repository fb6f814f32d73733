//! Stable content hashes used for fingerprints, cache keys and seed streams.

use sha2::{Digest, Sha256};

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Hashes a sequence of fields with length prefixes so that field boundaries cannot collide.
pub fn hash_fields<'a>(fields: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for f in fields {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    h.finalize().into()
}

pub fn stable_u64(fields: &[&[u8]]) -> u64 {
    let digest = hash_fields(fields.iter().copied());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derives an independent seed for a named sub-stream (e.g. "wpi", "sampling") and key.
pub fn derive_seed(seed: u64, stream: &str, key: &str) -> u64 {
    stable_u64(&[&seed.to_le_bytes(), stream.as_bytes(), key.as_bytes()])
}

use sha2::{Digest, Sha256};

pub type Digest256 = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest256 {
    Sha256::digest(bytes).into()
}

/// Hashes the concatenation of `parts` with no separators. Callers put a
/// fixed-length or domain-tag prefix first.
pub fn sha256_parts(parts: &[&[u8]]) -> Digest256 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

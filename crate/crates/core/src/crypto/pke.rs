//! Hybrid public-key encryption: ephemeral X25519 agreement, HKDF-SHA256 key
//! schedule, AES-256-GCM payload.

use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use x25519_dalek::{EphemeralSecret, PublicKey, StaticSecret};

use super::aead::{AeadError, AeadKey, Sealed};

const PKE_INFO: &[u8] = b"qshield/pke/v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PkeError {
    #[error("malformed ciphertext")]
    Malformed,
    #[error("decryption failed")]
    Decryption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PkePublicKey(#[serde(with = "hex::serde")] pub [u8; 32]);

pub struct PkeSecretKey(StaticSecret);

impl PkeSecretKey {
    pub fn generate() -> Self {
        Self(StaticSecret::random_from_rng(rand::thread_rng()))
    }

    pub fn public_key(&self) -> PkePublicKey {
        PkePublicKey(PublicKey::from(&self.0).to_bytes())
    }

    pub fn decrypt(&self, ciphertext: &[u8]) -> Result<Vec<u8>, PkeError> {
        if ciphertext.len() < 32 {
            return Err(PkeError::Malformed);
        }
        let (eph, rest) = ciphertext.split_at(32);
        let eph: [u8; 32] = eph.try_into().unwrap();
        let shared = self.0.diffie_hellman(&PublicKey::from(eph));
        let key = derive_key(shared.as_bytes(), &eph, &self.public_key().0);
        let sealed = Sealed::from_bytes(rest).map_err(|_| PkeError::Malformed)?;
        key.open(&sealed, &eph).map_err(|e| match e {
            AeadError::Malformed => PkeError::Malformed,
            _ => PkeError::Decryption,
        })
    }
}

impl PkePublicKey {
    /// Output layout: `ephemeral_pub (32) || nonce || body || tag`.
    pub fn encrypt(&self, plaintext: &[u8]) -> Vec<u8> {
        let eph_secret = EphemeralSecret::random_from_rng(rand::thread_rng());
        let eph_pub = PublicKey::from(&eph_secret).to_bytes();
        let shared = eph_secret.diffie_hellman(&PublicKey::from(self.0));
        let key = derive_key(shared.as_bytes(), &eph_pub, &self.0);
        let mut out = eph_pub.to_vec();
        out.extend_from_slice(&key.seal(plaintext, &eph_pub).to_bytes());
        out
    }
}

fn derive_key(shared: &[u8; 32], eph_pub: &[u8; 32], recipient: &[u8; 32]) -> AeadKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph_pub);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(PKE_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
    AeadKey::from_bytes(okm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let sk = PkeSecretKey::generate();
        let ct = sk.public_key().encrypt(b"token body");
        assert_eq!(sk.decrypt(&ct).unwrap(), b"token body");
    }

    #[test]
    fn other_recipient_cannot_decrypt() {
        let sk = PkeSecretKey::generate();
        let ct = sk.public_key().encrypt(b"token body");
        assert_eq!(PkeSecretKey::generate().decrypt(&ct), Err(PkeError::Decryption));
        assert_eq!(sk.decrypt(&ct[..20]), Err(PkeError::Malformed));
    }
}

//! AES-256-GCM with a fresh random nonce per message.

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AeadError {
    #[error("authentication failed")]
    Authentication,
    #[error("malformed ciphertext")]
    Malformed,
    #[error("empty plaintext")]
    EmptyMessage,
}

/// A 256-bit AEAD key. Wiped on drop.
#[derive(Clone, Zeroize, ZeroizeOnDrop, PartialEq, Eq)]
pub struct AeadKey([u8; 32]);

impl AeadKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn generate() -> Self {
        let mut bytes = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn seal(&self, plaintext: &[u8], aad: &[u8]) -> Sealed {
        let mut nonce = [0u8; NONCE_LEN];
        rand::thread_rng().fill_bytes(&mut nonce);
        let cipher = Aes256Gcm::new(self.0.as_ref().into());
        let mut body = plaintext.to_vec();
        let tag = cipher
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), aad, &mut body)
            .expect("plaintext within AES-GCM length limit");
        Sealed { nonce, body, tag: tag.into() }
    }

    pub fn open(&self, sealed: &Sealed, aad: &[u8]) -> Result<Vec<u8>, AeadError> {
        let cipher = Aes256Gcm::new(self.0.as_ref().into());
        let mut body = sealed.body.clone();
        cipher
            .decrypt_in_place_detached(
                Nonce::from_slice(&sealed.nonce),
                aad,
                &mut body,
                Tag::from_slice(&sealed.tag),
            )
            .map_err(|_| AeadError::Authentication)?;
        Ok(body)
    }
}

impl std::fmt::Debug for AeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AeadKey(..)")
    }
}

/// An authenticated ciphertext: nonce, encrypted body, and GCM tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sealed {
    #[serde(with = "hex::serde")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hex::serde")]
    pub body: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub tag: [u8; TAG_LEN],
}

impl Sealed {
    /// `nonce || body || tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.body.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AeadError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(AeadError::Malformed);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().unwrap(),
            body: body.to_vec(),
            tag: tag.try_into().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_wrong_key() {
        let key = AeadKey::generate();
        let sealed = key.seal(b"hello", b"ad");
        assert_eq!(key.open(&sealed, b"ad").unwrap(), b"hello");
        assert_eq!(key.open(&sealed, b"other"), Err(AeadError::Authentication));
        assert_eq!(AeadKey::generate().open(&sealed, b"ad"), Err(AeadError::Authentication));
    }

    #[test]
    fn byte_encoding_round_trips() {
        let key = AeadKey::generate();
        let sealed = key.seal(b"payload", b"");
        let decoded = Sealed::from_bytes(&sealed.to_bytes()).unwrap();
        assert_eq!(decoded, sealed);
        assert_eq!(Sealed::from_bytes(&[0u8; 10]), Err(AeadError::Malformed));
    }
}

//! Ed25519 signatures for trust proofs and attestation quotes.

use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("signature verification failed")]
pub struct SignatureError;

pub struct SigningKey(ed25519_dalek::SigningKey);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigPublicKey(#[serde(with = "hex::serde")] pub [u8; 32]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "hex::serde")] pub [u8; 64]);

impl SigningKey {
    pub fn generate() -> Self {
        Self(ed25519_dalek::SigningKey::generate(&mut rand::rngs::OsRng))
    }

    pub fn public_key(&self) -> SigPublicKey {
        SigPublicKey(self.0.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.0.sign(msg).to_bytes())
    }
}

impl SigPublicKey {
    pub fn verify(&self, msg: &[u8], sig: &Signature) -> Result<(), SignatureError> {
        let key = ed25519_dalek::VerifyingKey::from_bytes(&self.0).map_err(|_| SignatureError)?;
        key.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).map_err(|_| SignatureError)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_and_reject_mutation() {
        let sk = SigningKey::generate();
        let pk = sk.public_key();
        let sig = sk.sign(b"trace");
        assert!(pk.verify(b"trace", &sig).is_ok());
        assert_eq!(pk.verify(b"trade", &sig), Err(SignatureError));
        let mut bad = sig;
        bad.0[3] ^= 1;
        assert_eq!(pk.verify(b"trace", &bad), Err(SignatureError));
        assert!(SigningKey::generate().public_key().verify(b"trace", &sig).is_err());
    }
}

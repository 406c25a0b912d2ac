//! Cryptographic building blocks: hashing, authenticated encryption, the
//! token PKE, and the bilinear two-level secret sharing scheme.

pub mod aead;
pub mod hash;
pub mod pke;
pub mod sharing;
pub mod sign;

pub use aead::{AeadError, AeadKey, Sealed};
pub use sign::{SigPublicKey, Signature, SignatureError, SigningKey};
pub use hash::{sha256, sha256_parts, Digest256};
pub use sharing::{
    EnclaveShare, GroupContext, ShareSet, SharingError, SymmetricKey, TaggedCiphertext, UserShare,
};

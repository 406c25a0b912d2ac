//! Query tokens: a user share, the endurance budget, and a counter, sealed to
//! the core's public key.

use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::crypto::pke::{PkePublicKey, PkeSecretKey};
use crate::crypto::UserShare;

const TOKEN_MAGIC: &[u8; 5] = b"QSTK1";

/// Opaque token ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryToken(#[serde(with = "hex::serde")] pub Vec<u8>);

pub struct TokenContents {
    pub share: UserShare,
    pub omega: u64,
    pub counter: u64,
}

impl TokenContents {
    /// Plaintext layout: `"QSTK1" || share || omega (u64 BE) || counter (u64 BE)`.
    pub fn seal(&self, core_pub: &PkePublicKey) -> QueryToken {
        let mut pt = Zeroizing::new(TOKEN_MAGIC.to_vec());
        pt.extend_from_slice(&self.share.to_bytes());
        pt.extend_from_slice(&self.omega.to_be_bytes());
        pt.extend_from_slice(&self.counter.to_be_bytes());
        QueryToken(core_pub.encrypt(&pt))
    }

    pub(crate) fn open(token: &QueryToken, core_key: &PkeSecretKey) -> Option<Self> {
        let pt = Zeroizing::new(core_key.decrypt(&token.0).ok()?);
        let body = pt.strip_prefix(TOKEN_MAGIC)?;
        let split = body.len().checked_sub(16)?;
        let (share, tail) = body.split_at(split);
        let share = UserShare::from_bytes(share).ok()?;
        let omega = u64::from_be_bytes(tail[..8].try_into().ok()?);
        let counter = u64::from_be_bytes(tail[8..].try_into().ok()?);
        Some(Self { share, omega, counter })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sharing::setup;

    #[test]
    fn round_trip_and_wrong_key() {
        let set = setup(128, 2).unwrap();
        let sk = PkeSecretKey::generate();
        let tk = TokenContents { share: set.users[1].clone(), omega: 5, counter: 9 }
            .seal(&sk.public_key());
        let back = TokenContents::open(&tk, &sk).unwrap();
        assert_eq!((back.omega, back.counter), (5, 9));
        assert_eq!(back.share.uid(), set.users[1].uid());
        assert!(TokenContents::open(&tk, &PkeSecretKey::generate()).is_none());
        let mut bad = tk.clone();
        bad.0[40] ^= 1;
        assert!(TokenContents::open(&bad, &sk).is_none());
    }
}

//! 256-bit identifiers rendered as lowercase hex.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256_parts, Digest256};

macro_rules! id256 {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(#[serde(with = "hex::serde")] pub [u8; 32]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let mut out = [0u8; 32];
                hex::decode_to_slice(s, &mut out).ok()?;
                Some(Self(out))
            }

            /// First eight hex digits.
            pub fn short(&self) -> String {
                hex::encode(&self.0[..4])
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), self.short())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl From<Digest256> for $name {
            fn from(d: Digest256) -> Self {
                Self(d)
            }
        }
    };
}

id256!(
    /// Collection identifier.
    CollectionId
);
id256!(
    /// Data-user identifier, the hash of the user's share encoding.
    Uid
);
id256!(
    /// Identifier of an attested channel, the hash of its handshake transcript.
    ChannelId
);
id256!(
    /// Document identifier, the hash of the document ciphertext.
    DocumentId
);

impl CollectionId {
    /// Collection ids are bound to collection names so that the trusted core
    /// can check the name the host reports for a ciphertext group.
    pub fn for_name(name: &str) -> Self {
        Self(sha256_parts(&[b"qshield/cid/v1\0", name.as_bytes()]))
    }
}

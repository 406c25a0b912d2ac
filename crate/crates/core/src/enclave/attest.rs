//! Simulated attestation and the authenticated key exchange that follows it.
//!
//! A measurement is the hash of a build-artifact descriptor. The responder
//! (core or worker) signs a quote binding its measurement to an X25519
//! exchange; the initiator checks the measurement against the value it
//! expects and derives the shared channel key with HKDF.

use hkdf::Hkdf;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use x25519_dalek::{EphemeralSecret, PublicKey};
use zeroize::Zeroizing;

use super::CoreError;
use crate::crypto::{sha256_parts, AeadKey, Digest256, Sealed, SigPublicKey, Signature, SigningKey};
use crate::ids::ChannelId;
use crate::operator::OperatorKind;

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn core_measurement() -> Digest256 {
    sha256_parts(&[b"qshield/measurement/v1\0", b"trusted-core\0", VERSION.as_bytes()])
}

pub fn worker_measurement(op: OperatorKind) -> Digest256 {
    sha256_parts(&[
        b"qshield/measurement/v1\0",
        b"worker\0",
        op.name().as_bytes(),
        b"\0",
        VERSION.as_bytes(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Owner,
    Broker,
}

impl Party {
    fn tag(self) -> &'static [u8] {
        match self {
            Party::Owner => b"owner",
            Party::Broker => b"broker",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelOffer {
    pub party: Party,
    #[serde(with = "hex::serde")]
    pub party_pub: [u8; 32],
    #[serde(with = "hex::serde")]
    pub nonce: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    #[serde(with = "hex::serde")]
    pub measurement: Digest256,
    /// What the responder claims to be, e.g. `trusted-core` or a worker
    /// descriptor.
    pub subject: String,
    #[serde(with = "hex::serde")]
    pub responder_pub: [u8; 32],
    pub sig_pub: SigPublicKey,
    pub sig: Signature,
}

fn transcript(offer: &ChannelOffer, q: &Quote) -> Digest256 {
    sha256_parts(&[
        b"qshield/attest/v1\0",
        offer.party.tag(),
        &offer.party_pub,
        &offer.nonce,
        &q.measurement,
        q.subject.as_bytes(),
        b"\0",
        &q.responder_pub,
        &q.sig_pub.0,
    ])
}

fn derive(shared: &[u8; 32], transcript: &Digest256) -> AeadKey {
    let hk = Hkdf::<Sha256>::new(Some(transcript), shared);
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(b"qshield/channel/v1", okm.as_mut()).expect("32 bytes is a valid HKDF length");
    AeadKey::from_bytes(*okm)
}

/// One end of an established channel.
pub struct Channel {
    id: ChannelId,
    key: AeadKey,
}

#[derive(Serialize, Deserialize)]
struct Framed<T> {
    seq: u64,
    body: T,
}

impl Channel {
    pub fn id(&self) -> ChannelId {
        self.id
    }

    fn aad(&self, kind: &[u8]) -> Vec<u8> {
        [kind, b"\0", self.id.as_bytes()].concat()
    }

    /// Seals `body` with a sequence number under the channel key. `kind`
    /// separates message types.
    pub fn seal<T: Serialize>(&self, kind: &[u8], seq: u64, body: &T) -> Sealed {
        let pt = Zeroizing::new(
            serde_json::to_vec(&Framed { seq, body }).expect("channel messages serialize"),
        );
        self.key.seal(&pt, &self.aad(kind))
    }

    pub fn open<T: DeserializeOwned>(&self, kind: &[u8], sealed: &Sealed) -> Result<(u64, T), CoreError> {
        let pt = Zeroizing::new(
            self.key
                .open(sealed, &self.aad(kind))
                .map_err(|_| CoreError::Channel("message failed authentication".into()))?,
        );
        let framed: Framed<T> = serde_json::from_slice(&pt)
            .map_err(|_| CoreError::Channel("malformed channel message".into()))?;
        Ok((framed.seq, framed.body))
    }

    /// `id (32) || key (32)`; the second half is secret.
    pub fn to_bytes(&self) -> Zeroizing<Vec<u8>> {
        Zeroizing::new([self.id.as_bytes().as_slice(), self.key.as_bytes()].concat())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoreError> {
        if bytes.len() != 64 {
            return Err(CoreError::Channel("bad channel key file".into()));
        }
        let mut key = Zeroizing::new([0u8; 32]);
        key.copy_from_slice(&bytes[32..]);
        Ok(Self {
            id: ChannelId(bytes[..32].try_into().expect("32 bytes")),
            key: AeadKey::from_bytes(*key),
        })
    }
}

/// Initiating side of a handshake.
pub struct ChannelInitiator {
    secret: EphemeralSecret,
    offer: ChannelOffer,
}

impl ChannelInitiator {
    pub fn new(party: Party) -> Self {
        let secret = EphemeralSecret::random_from_rng(rand::rngs::OsRng);
        let mut nonce = [0u8; 32];
        rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut nonce);
        let offer =
            ChannelOffer { party, party_pub: PublicKey::from(&secret).to_bytes(), nonce };
        Self { secret, offer }
    }

    pub fn offer(&self) -> &ChannelOffer {
        &self.offer
    }

    /// Checks the quote and derives the channel. `expected_signer` pins the
    /// responder's signing key when it is known in advance.
    pub fn finish(
        self,
        quote: &Quote,
        expected_measurement: &Digest256,
        expected_signer: Option<&SigPublicKey>,
    ) -> Result<Channel, CoreError> {
        if &quote.measurement != expected_measurement {
            return Err(CoreError::Attestation("measurement mismatch".into()));
        }
        if expected_signer.is_some_and(|k| k != &quote.sig_pub) {
            return Err(CoreError::Attestation("quote signed by an unexpected key".into()));
        }
        let t = transcript(&self.offer, quote);
        quote
            .sig_pub
            .verify(&t, &quote.sig)
            .map_err(|_| CoreError::Attestation("bad quote signature".into()))?;
        let shared = self.secret.diffie_hellman(&PublicKey::from(quote.responder_pub));
        Ok(Channel { id: ChannelId(t), key: derive(shared.as_bytes(), &t) })
    }
}

/// Responding side: produces the signed quote and the shared channel.
pub(crate) fn respond(
    offer: &ChannelOffer,
    measurement: Digest256,
    subject: &str,
    signer: &SigningKey,
) -> (Quote, Channel) {
    let secret = EphemeralSecret::random_from_rng(rand::rngs::OsRng);
    let responder_pub = PublicKey::from(&secret).to_bytes();
    let mut quote = Quote {
        measurement,
        subject: subject.to_owned(),
        responder_pub,
        sig_pub: signer.public_key(),
        sig: Signature([0; 64]),
    };
    let t = transcript(offer, &quote);
    quote.sig = signer.sign(&t);
    let shared = secret.diffie_hellman(&PublicKey::from(offer.party_pub));
    (quote, Channel { id: ChannelId(t), key: derive(shared.as_bytes(), &t) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handshake(responder_measurement: Digest256) -> (Result<Channel, CoreError>, Channel) {
        let signer = SigningKey::generate();
        let init = ChannelInitiator::new(Party::Owner);
        let (quote, core_side) = respond(init.offer(), responder_measurement, "trusted-core", &signer);
        (init.finish(&quote, &core_measurement(), Some(&signer.public_key())), core_side)
    }

    #[test]
    fn both_sides_derive_the_same_key() {
        let (owner, core) = handshake(core_measurement());
        let owner = owner.unwrap();
        assert_eq!(owner.id(), core.id());
        assert_eq!(*owner.to_bytes(), *core.to_bytes());
        let msg = owner.seal(b"provision", 1, &"hello");
        assert_eq!(core.open::<String>(b"provision", &msg).unwrap(), (1, "hello".into()));
        assert!(core.open::<String>(b"policy", &msg).is_err());
    }

    #[test]
    fn mutated_measurement_fails() {
        let mut m = core_measurement();
        m[0] ^= 1;
        assert!(matches!(handshake(m).0, Err(CoreError::Attestation(_))));
    }

    #[test]
    fn channels_are_independent() {
        let (a, _) = handshake(core_measurement());
        let (b, _) = handshake(core_measurement());
        assert_ne!(*a.unwrap().to_bytes(), *b.unwrap().to_bytes());
    }

    #[test]
    fn forged_quote_fails() {
        let signer = SigningKey::generate();
        let init = ChannelInitiator::new(Party::Owner);
        let (mut quote, _) = respond(init.offer(), core_measurement(), "trusted-core", &signer);
        quote.responder_pub[0] ^= 1;
        assert!(matches!(
            init.finish(&quote, &core_measurement(), None),
            Err(CoreError::Attestation(_))
        ));
    }
}

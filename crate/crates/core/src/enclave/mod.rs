//! The trusted core: key custody, the unlock step, endurance-bounded
//! operators, and signed execution traces.
//!
//! Everything here runs on one logical thread. Callers reach it through
//! [`crate::wire`] frames so that nothing is shared by reference across the
//! boundary.

mod attest;
mod broker;
mod token;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use attest::{
    core_measurement, worker_measurement, Channel, ChannelInitiator, ChannelOffer, Party, Quote,
};
pub use broker::{Worker, WorkerDescriptor};
pub use token::{QueryToken, TokenContents};
pub use trace::{encode_trust_proof, FuncRecord, ResponseEnvelope, TraceRecord, RESULT_AAD};

use crate::crypto::pke::{PkePublicKey, PkeSecretKey};
use crate::crypto::sharing::{self, EnclaveShare, GroupContext, SharingError, TaggedCiphertext};
use crate::crypto::{AeadKey, Digest256, Sealed, SigPublicKey, SigningKey};
use crate::document::{Collection, Document};
use crate::ids::{ChannelId, CollectionId};
use crate::operator::{Operator, OperatorKind, StatePayload};
use crate::policy::{Policy, PolicyUpdate};

/// Errors returned across the trusted boundary. Messages never carry key
/// material or protected plaintext.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum CoreError {
    #[error("state error: {0}")]
    State(String),
    #[error("endurance budget exhausted")]
    Endurance,
    #[error("token counter already used")]
    Replay,
    #[error("user is not authorized")]
    Authorization,
    #[error("query token rejected")]
    Token,
    #[error("channel error: {0}")]
    Channel(String),
    #[error("attestation failed: {0}")]
    Attestation(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("operator error: {0}")]
    Operator(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("boundary error: {0}")]
    Boundary(String),
}

fn state_err(msg: impl Into<String>) -> CoreError {
    CoreError::State(msg.into())
}

/// Public system parameters published at initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicParams {
    pub pke_pub: PkePublicKey,
    pub sig_pub: SigPublicKey,
    #[serde(with = "hex::serde")]
    pub measurement: Digest256,
}

/// The ciphertexts of one collection as handed over by the host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedCollection {
    pub name: String,
    pub cid: CollectionId,
    pub docs: Vec<Sealed>,
}

/// Body of a provisioning message.
#[derive(Serialize, Deserialize)]
pub struct Provisioning {
    #[serde(with = "hex::serde")]
    pub enclave_share: Vec<u8>,
    pub policy: Policy,
}

/// Contents of an acknowledgement: the sequence number it answers and the
/// digest of the policy now installed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckBody {
    #[serde(with = "hex::serde")]
    pub policy_digest: Digest256,
}

pub const PROVISION_KIND: &[u8] = b"provision";
pub const POLICY_KIND: &[u8] = b"policy";
pub const ACK_KIND: &[u8] = b"ack";

/// Public view of the current session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub finalized: bool,
    pub budget: u64,
    pub states: u64,
}

struct QueryState {
    p_states: Vec<u64>,
    func: FuncRecord,
    s_db: Option<StatePayload>,
    digest: Digest256,
    w: u64,
}

struct Session {
    states: Vec<QueryState>,
    budget: u64,
    user_key: Option<AeadKey>,
    finalized: bool,
}

impl Session {
    fn active(&mut self) -> Result<&mut Self, CoreError> {
        if self.finalized {
            return Err(state_err("session already finalized"));
        }
        Ok(self)
    }

    fn push(&mut self, p_states: Vec<u64>, func: FuncRecord, s_db: StatePayload) -> u64 {
        self.budget -= 1;
        let s_id = self.states.len() as u64;
        let digest = s_db.digest();
        self.states.push(QueryState { p_states, func, s_db: Some(s_db), digest, w: self.budget });
        s_id
    }
}

struct Identity {
    pke: PkeSecretKey,
    sig: SigningKey,
}

struct OwnerChannel {
    channel: Channel,
    last_seq: Option<u64>,
}

pub struct TrustedCore {
    measurement: Digest256,
    identity: Option<Identity>,
    channels: BTreeMap<ChannelId, OwnerChannel>,
    sk_a: Option<EnclaveShare>,
    policy: Policy,
    replay_floor: Option<u64>,
    session: Option<Session>,
    broker: broker::BrokerState,
}

impl Default for TrustedCore {
    fn default() -> Self {
        Self::new()
    }
}

impl TrustedCore {
    pub fn new() -> Self {
        Self::with_measurement(core_measurement())
    }

    /// A core reporting a different measurement, standing in for a modified
    /// build.
    pub fn with_measurement(measurement: Digest256) -> Self {
        Self {
            measurement,
            identity: None,
            channels: BTreeMap::new(),
            sk_a: None,
            policy: Policy::new(),
            replay_floor: None,
            session: None,
            broker: broker::BrokerState::default(),
        }
    }

    fn identity(&self) -> Result<&Identity, CoreError> {
        self.identity.as_ref().ok_or_else(|| state_err("core is not initialized"))
    }

    pub fn init(&mut self, lambda: u32) -> Result<PublicParams, CoreError> {
        if self.identity.is_some() {
            return Err(state_err("core is already initialized"));
        }
        GroupContext::new(lambda).map_err(|e| state_err(e.to_string()))?;
        self.identity = Some(Identity { pke: PkeSecretKey::generate(), sig: SigningKey::generate() });
        self.public_params()
    }

    pub fn public_params(&self) -> Result<PublicParams, CoreError> {
        let id = self.identity()?;
        Ok(PublicParams {
            pke_pub: id.pke.public_key(),
            sig_pub: id.sig.public_key(),
            measurement: self.measurement,
        })
    }

    /// Answers an owner's channel offer with a signed quote.
    pub fn attest(&mut self, offer: &ChannelOffer) -> Result<Quote, CoreError> {
        if offer.party != Party::Owner {
            return Err(CoreError::Attestation("the core only accepts owner channels".into()));
        }
        let (quote, channel) = attest::respond(offer, self.measurement, "trusted-core", &self.identity()?.sig);
        self.channels.insert(channel.id(), OwnerChannel { channel, last_seq: None });
        Ok(quote)
    }

    /// Opens an owner message, enforcing strictly increasing sequence
    /// numbers per channel. The sequence number is only committed by
    /// [`Self::commit_seq`].
    fn open_owner<T: serde::de::DeserializeOwned>(
        &self,
        channel: &ChannelId,
        kind: &[u8],
        msg: &Sealed,
    ) -> Result<(u64, T), CoreError> {
        let oc = self.channels.get(channel).ok_or_else(|| CoreError::Channel("unknown channel".into()))?;
        let (seq, body) = oc.channel.open::<T>(kind, msg)?;
        if oc.last_seq.is_some_and(|last| seq <= last) {
            return Err(CoreError::Channel("stale message sequence number".into()));
        }
        Ok((seq, body))
    }

    fn commit_seq(&mut self, channel: &ChannelId, seq: u64) -> Result<Sealed, CoreError> {
        let digest = self.policy.digest();
        let oc = self.channels.get_mut(channel).expect("opened on this channel");
        oc.last_seq = Some(seq);
        Ok(oc.channel.seal(ACK_KIND, seq, &AckBody { policy_digest: digest }))
    }

    /// Installs `sk_a` (first time only) and replaces the policy.
    pub fn provision(&mut self, channel: &ChannelId, msg: &Sealed) -> Result<Sealed, CoreError> {
        self.identity()?;
        let (seq, body): (u64, Provisioning) = self.open_owner(channel, PROVISION_KIND, msg)?;
        body.policy.validate().map_err(|e| CoreError::Policy(e.to_string()))?;
        if self.sk_a.is_none() {
            let share = EnclaveShare::from_bytes(&body.enclave_share)
                .map_err(|_| CoreError::Channel("malformed enclave share".into()))?;
            self.sk_a = Some(share);
        }
        self.policy = body.policy;
        self.commit_seq(channel, seq)
    }

    pub fn update_policy(&mut self, channel: &ChannelId, msg: &Sealed) -> Result<Sealed, CoreError> {
        self.identity()?;
        let (seq, update): (u64, PolicyUpdate) = self.open_owner(channel, POLICY_KIND, msg)?;
        self.policy.apply(&update).map_err(|e| CoreError::Policy(e.to_string()))?;
        self.commit_seq(channel, seq)
    }

    /// Recovers the authorized collections for the token's user and opens a
    /// session whose first state holds them.
    pub fn unlock(
        &mut self,
        token: &QueryToken,
        collections: &[SealedCollection],
    ) -> Result<u64, CoreError> {
        let identity = self.identity()?;
        let sk_a = self.sk_a.as_ref().ok_or_else(|| state_err("core is not provisioned"))?;
        if self.session.as_ref().is_some_and(|s| !s.finalized) {
            return Err(state_err("a session is already in progress"));
        }
        let contents = TokenContents::open(token, &identity.pke).ok_or(CoreError::Token)?;
        if self.replay_floor.is_some_and(|floor| contents.counter <= floor) {
            return Err(CoreError::Replay);
        }
        self.replay_floor = Some(contents.counter);

        let mut tagged = Vec::new();
        for c in collections {
            if CollectionId::for_name(&c.name) != c.cid {
                return Err(CoreError::Integrity(format!("collection id does not match name {}", c.name)));
            }
            tagged.extend(c.docs.iter().map(|ct| TaggedCiphertext { cid: c.cid, ct: ct.clone() }));
        }
        let mut plaintexts =
            sharing::decrypt(&self.policy, sk_a, &contents.share, &tagged).map_err(|e| match e {
                SharingError::Authorization => CoreError::Authorization,
                SharingError::Context | SharingError::Argument(_) => CoreError::Token,
                _ => CoreError::Integrity("collection ciphertext failed authentication".into()),
            })?;
        let granted: BTreeSet<CollectionId> = self
            .policy
            .lookup(&contents.share.uid())
            .map(|e| e.cids.clone())
            .unwrap_or_default();

        let mut db = Vec::new();
        for c in collections.iter().filter(|c| granted.contains(&c.cid)) {
            let docs = plaintexts
                .remove(&c.cid)
                .unwrap_or_default()
                .iter()
                .map(|pt| Document::from_json(pt))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CoreError::Integrity(format!("malformed document in {}", c.name)))?;
            let collection = Collection::named(&c.name, docs)
                .map_err(|_| CoreError::Integrity(format!("inconsistent documents in {}", c.name)))?;
            db.push(collection);
        }

        let payload = StatePayload::database(db);
        let digest = payload.digest();
        let s0 = QueryState {
            p_states: Vec::new(),
            func: FuncRecord {
                f_name: "unlock".into(),
                f_params: serde_json::json!({ "counter": contents.counter }),
                worker: None,
            },
            s_db: Some(payload),
            digest,
            w: contents.omega,
        };
        self.session = Some(Session {
            states: vec![s0],
            budget: contents.omega,
            user_key: Some(contents.share.result_key()),
            finalized: false,
        });
        Ok(0)
    }

    /// Validates an invocation without running it: live session, remaining
    /// budget, known operator, matching arity, existing inputs.
    fn check_invocation(
        &mut self,
        f_name: &str,
        f_params: &serde_json::Value,
        inputs: &[u64],
    ) -> Result<Operator, CoreError> {
        let session = self.session.as_mut().ok_or_else(|| state_err("no session"))?.active()?;
        if session.budget == 0 {
            return Err(CoreError::Endurance);
        }
        let kind = OperatorKind::from_name(f_name)
            .ok_or_else(|| state_err(format!("unknown operator {f_name}")))?;
        if inputs.len() != kind.arity() {
            return Err(state_err(format!(
                "{f_name} takes {} input state(s), got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        for &i in inputs {
            if session.states.get(i as usize).is_none() {
                return Err(state_err(format!("unknown state {i}")));
            }
        }
        Operator::from_parts(f_name, f_params.clone()).map_err(|e| CoreError::Operator(e.to_string()))
    }

    fn input_payloads(&self, inputs: &[u64]) -> Result<Vec<&StatePayload>, CoreError> {
        let session = self.session.as_ref().ok_or_else(|| state_err("no session"))?;
        inputs
            .iter()
            .map(|&i| {
                session.states[i as usize]
                    .s_db
                    .as_ref()
                    .ok_or_else(|| state_err(format!("state {i} has been erased")))
            })
            .collect()
    }

    /// Runs one operator over existing states and records the new state.
    /// A failed invocation leaves budget and trace untouched.
    pub fn exec_operator(
        &mut self,
        f_name: &str,
        f_params: &serde_json::Value,
        inputs: &[u64],
    ) -> Result<u64, CoreError> {
        let op = self.check_invocation(f_name, f_params, inputs)?;
        let out = op
            .apply(&self.input_payloads(inputs)?)
            .map_err(|e| CoreError::Operator(e.to_string()))?;
        let func = FuncRecord { f_name: op.name().into(), f_params: op.params_json(), worker: None };
        let session = self.session.as_mut().expect("checked above");
        Ok(session.push(inputs.to_vec(), func, out))
    }

    /// Seals the payload of `s_id` for the user, signs the trace of every
    /// state, and closes the session.
    pub fn finalize(&mut self, s_id: u64) -> Result<ResponseEnvelope, CoreError> {
        let identity = self.identity.as_ref().ok_or_else(|| state_err("core is not initialized"))?;
        let session = self.session.as_mut().ok_or_else(|| state_err("no session"))?.active()?;
        let state = session
            .states
            .get(s_id as usize)
            .ok_or_else(|| state_err(format!("unknown state {s_id}")))?;
        let payload = state.s_db.as_ref().ok_or_else(|| state_err("state has been erased"))?;
        let key = session.user_key.as_ref().ok_or_else(|| state_err("session key missing"))?;
        let pt = zeroize::Zeroizing::new(payload.to_canonical_json());
        let result = key.seal(&pt, RESULT_AAD);

        let records: Vec<TraceRecord> = session
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| TraceRecord {
                s_id: i as u64,
                p_states: s.p_states.clone(),
                func: s.func.clone(),
                s_db_digest: s.digest,
                w: s.w,
            })
            .collect();
        let tp = encode_trust_proof(&records);
        let sig = identity.sig.sign(tp.as_bytes());

        session.budget = 0;
        session.user_key = None;
        for s in &mut session.states {
            s.s_db = None;
        }
        session.finalized = true;
        self.broker.pending = None;
        Ok(ResponseEnvelope { result, tp, sig })
    }

    /// Drops the current session without producing a response. The replay
    /// floor is kept.
    pub fn abort(&mut self) {
        self.session = None;
        self.broker.pending = None;
    }

    pub fn status(&self) -> Option<SessionStatus> {
        self.session.as_ref().map(|s| SessionStatus {
            finalized: s.finalized,
            budget: s.budget,
            states: s.states.len() as u64,
        })
    }
}

//! Data-owner and data-user workflows: key ceremony, encryption and upload,
//! policy updates over the attested channel, token minting, result
//! decryption, and trust-proof auditing.

mod audit;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use audit::{audit_proof, AuditReport, CheckResult, Expectation, Verdict, CHECK_NAMES};

use crate::crypto::sharing::{self, ShareSet, SharingError, UserShare};
use crate::crypto::{Digest256, Sealed};
use crate::document::{Collection, Document};
use crate::enclave::{
    AckBody, Channel, ChannelInitiator, CoreError, Party, Provisioning, PublicParams, QueryToken,
    ResponseEnvelope, TokenContents, ACK_KIND, POLICY_KIND, PROVISION_KIND,
};
use crate::host::{document_id, HostError, QueryRequest, ServiceClient};
use crate::ids::{CollectionId, DocumentId, Uid};
use crate::operator::StatePayload;
use crate::policy::{Policy, PolicyUpdate};
use crate::query::{compute_endurance, parse, plan, Catalog, CatalogEntry, QueryPlan};
use crate::wire::Boundary;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("query rejected: {0}")]
    Query(String),
    #[error("document rejected: {0}")]
    Document(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("acknowledgement rejected: {0}")]
    Ack(String),
    #[error("result failed authentication")]
    Integrity,
    #[error("trust proof signature does not verify")]
    Proof,
    #[error("counter {requested} does not exceed the last used counter {last}")]
    Counter { requested: u64, last: u64 },
    #[error("not connected to an attested core")]
    NotConnected,
    #[error("state file error: {0}")]
    State(String),
}

/// Compiles `q` against `catalog`. Users and the host share this planner,
/// so both derive the same plan.
pub fn compile(q: &str, catalog: &Catalog) -> Result<QueryPlan, ClientError> {
    let ast = parse(q).map_err(|e| ClientError::Query(e.to_string()))?;
    plan(&ast, catalog).map_err(|e| ClientError::Query(e.to_string()))
}

/// Catalog view of the manifests a host publishes.
pub fn catalog_of<S: Boundary>(svc: &ServiceClient<S>) -> Result<Catalog, ClientError> {
    Ok(svc
        .catalog()?
        .into_iter()
        .map(|m| (m.name, CatalogEntry { cid: m.cid, schema: m.schema }))
        .collect())
}

pub enum UploadTarget<'a> {
    Existing(CollectionId),
    /// Create the collection first and grant it to these users.
    New { name: &'a str, authorized: &'a [Uid] },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReceipt {
    pub cid: CollectionId,
    pub dids: Vec<DocumentId>,
    /// Documents that were not already stored.
    pub stored: usize,
}

pub struct OwnerContext {
    share_set: ShareSet,
    pol: Policy,
    channel: Option<Channel>,
    seq: u64,
    params: Option<PublicParams>,
}

impl OwnerContext {
    /// Generates the shares for `n` users and a policy listing every user
    /// with no collections.
    pub fn setup(lambda: u32, n: usize) -> Result<Self, ClientError> {
        let share_set = sharing::setup(lambda, n)?;
        let mut pol = Policy::new();
        for user in &share_set.users {
            pol.apply(&PolicyUpdate::Add { uid: user.uid(), cids: BTreeSet::new() })
                .map_err(|e| ClientError::Policy(e.to_string()))?;
        }
        Ok(Self { share_set, pol, channel: None, seq: 0, params: None })
    }

    pub fn n(&self) -> usize {
        self.share_set.n()
    }

    /// Share of user `i` (1-based), for out-of-band handoff.
    pub fn user_share(&self, i: usize) -> Option<&UserShare> {
        i.checked_sub(1).and_then(|k| self.share_set.users.get(k))
    }

    pub fn users(&self) -> &[UserShare] {
        &self.share_set.users
    }

    pub fn policy(&self) -> &Policy {
        &self.pol
    }

    pub fn params(&self) -> Option<&PublicParams> {
        self.params.as_ref()
    }

    /// Attests the core behind `svc` and opens the owner channel. The
    /// quote must carry `measurement` and be signed by the published key.
    pub fn connect<S: Boundary>(
        &mut self,
        svc: &ServiceClient<S>,
        measurement: &Digest256,
    ) -> Result<PublicParams, ClientError> {
        let params = svc.public_params()?;
        if &params.measurement != measurement {
            return Err(CoreError::Attestation("published measurement mismatch".into()).into());
        }
        let init = ChannelInitiator::new(Party::Owner);
        let quote = svc.attest(init.offer())?;
        self.channel = Some(init.finish(&quote, measurement, Some(&params.sig_pub))?);
        self.seq = 0;
        self.params = Some(params.clone());
        Ok(params)
    }

    fn channel(&self) -> Result<&Channel, ClientError> {
        self.channel.as_ref().ok_or(ClientError::NotConnected)
    }

    fn check_ack(&self, ack: &Sealed, seq: u64, expected: &Policy) -> Result<(), ClientError> {
        let (acked, body): (u64, AckBody) = self
            .channel()?
            .open(ACK_KIND, ack)
            .map_err(|_| ClientError::Ack("acknowledgement failed authentication".into()))?;
        if acked != seq {
            return Err(ClientError::Ack(format!("acknowledges message {acked}, sent {seq}")));
        }
        if body.policy_digest != expected.digest() {
            return Err(ClientError::Ack("core holds a different policy".into()));
        }
        Ok(())
    }

    /// Sends `sk_a` and the current policy to the core.
    pub fn provision<S: Boundary>(&mut self, svc: &ServiceClient<S>) -> Result<(), ClientError> {
        let seq = self.seq + 1;
        let body = Provisioning { enclave_share: self.share_set.enclave.to_bytes(), policy: self.pol.clone() };
        let channel = self.channel()?;
        let ack = svc.provision(channel.id(), &channel.seal(PROVISION_KIND, seq, &body))?;
        self.seq = seq;
        self.check_ack(&ack, seq, &self.pol)
    }

    /// Applies `update` to the master policy and to the core's copy. The
    /// local copy only changes once the core acknowledges the same digest.
    pub fn update_policy<S: Boundary>(
        &mut self,
        svc: &ServiceClient<S>,
        update: &PolicyUpdate,
    ) -> Result<(), ClientError> {
        let mut next = self.pol.clone();
        next.apply(update).map_err(|e| ClientError::Policy(e.to_string()))?;
        let seq = self.seq + 1;
        let channel = self.channel()?;
        let ack = svc.update_policy(channel.id(), &channel.seal(POLICY_KIND, seq, update))?;
        self.seq = seq;
        self.check_ack(&ack, seq, &next)?;
        self.pol = next;
        Ok(())
    }

    /// Adds `cid` to each listed user's collection list.
    pub fn grant<S: Boundary>(
        &mut self,
        svc: &ServiceClient<S>,
        cid: CollectionId,
        users: &[Uid],
    ) -> Result<(), ClientError> {
        for uid in users {
            let entry = self.pol.lookup(uid).ok_or_else(|| ClientError::NotFound(format!("user {uid}")))?;
            if entry.cids.contains(&cid) {
                continue;
            }
            let mut cids = entry.cids.clone();
            cids.insert(cid);
            self.update_policy(svc, &PolicyUpdate::Modify { uid: *uid, cids })?;
        }
        Ok(())
    }

    /// Encrypts one document for collection `cid`.
    pub fn encrypt_document(&self, cid: &CollectionId, doc: &Document) -> Result<(DocumentId, Sealed), ClientError> {
        doc.validate().map_err(|e| ClientError::Document(e.to_string()))?;
        let ct = sharing::encrypt_document(&self.share_set.key, cid, &doc.to_canonical_json())?;
        Ok((document_id(&ct), ct))
    }

    /// Encrypts and uploads `docs`. A new collection is registered with the
    /// host and granted to its users before any document is sent.
    pub fn upload<S: Boundary>(
        &mut self,
        svc: &ServiceClient<S>,
        target: UploadTarget<'_>,
        docs: &[Document],
    ) -> Result<UploadReceipt, ClientError> {
        let catalog = catalog_of(svc)?;
        let (cid, schema) = match target {
            UploadTarget::Existing(cid) => {
                let entry = catalog
                    .values()
                    .find(|e| e.cid == cid)
                    .ok_or_else(|| ClientError::NotFound(format!("collection {cid}")))?;
                (cid, entry.schema.clone())
            }
            UploadTarget::New { name, authorized } => {
                let probe = Collection::named(name, docs.to_vec())
                    .map_err(|e| ClientError::Document(e.to_string()))?;
                let cid = probe.cid();
                svc.create_collection(name, cid, probe.schema())?;
                self.grant(svc, cid, authorized)?;
                (cid, probe.schema().clone())
            }
        };
        let mut sealed = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.len() != schema.len() || !doc.names().all(|n| schema.contains(n)) {
                return Err(ClientError::Document(format!("document {i} does not match the collection schema")));
            }
            sealed.push(self.encrypt_document(&cid, doc)?);
        }
        let stored = svc.upload(cid, &sealed)?;
        Ok(UploadReceipt { cid, dids: sealed.into_iter().map(|(d, _)| d).collect(), stored })
    }

    /// Serializes everything needed to resume: shares, policy, channel,
    /// and sequence number. The output holds key material.
    pub fn save(&self) -> zeroize::Zeroizing<Vec<u8>> {
        let state = OwnerState {
            shares: hex::encode(self.share_set.export()).into(),
            policy: self.pol.clone(),
            channel: self.channel.as_ref().map(|c| hex::encode(&*c.to_bytes()).into()),
            seq: self.seq,
            params: self.params.clone(),
        };
        zeroize::Zeroizing::new(serde_json::to_vec_pretty(&state).expect("owner state serializes"))
    }

    pub fn load(bytes: &[u8]) -> Result<Self, ClientError> {
        let bad = |what: &str| ClientError::State(format!("malformed {what}"));
        let state: OwnerState = serde_json::from_slice(bytes).map_err(|_| bad("owner state"))?;
        let shares = zeroize::Zeroizing::new(hex::decode(&*state.shares).map_err(|_| bad("share set"))?);
        let share_set = ShareSet::import(&shares)?;
        let channel = match &state.channel {
            Some(c) => {
                let raw = zeroize::Zeroizing::new(hex::decode(&**c).map_err(|_| bad("channel"))?);
                Some(Channel::from_bytes(&raw)?)
            }
            None => None,
        };
        Ok(Self { share_set, pol: state.policy, channel, seq: state.seq, params: state.params })
    }
}

#[derive(Serialize, Deserialize)]
struct OwnerState {
    shares: zeroize::Zeroizing<String>,
    policy: Policy,
    channel: Option<zeroize::Zeroizing<String>>,
    seq: u64,
    params: Option<PublicParams>,
}

/// A request on its way to the host, with what the user needs to check the
/// response.
#[derive(Debug, Clone)]
pub struct PendingQuery {
    pub request: QueryRequest,
    pub counter: u64,
    pub omega: u64,
    pub plan: QueryPlan,
}

pub struct UserContext {
    share: UserShare,
    /// Last counter used; tokens carry strictly larger ones.
    counter: u64,
    params: PublicParams,
}

impl UserContext {
    pub fn new(share: UserShare, params: PublicParams) -> Self {
        Self { share, counter: 0, params }
    }

    pub fn with_counter(mut self, last_used: u64) -> Self {
        self.counter = last_used;
        self
    }

    pub fn uid(&self) -> Uid {
        self.share.uid()
    }

    pub fn last_counter(&self) -> u64 {
        self.counter
    }

    pub fn params(&self) -> &PublicParams {
        &self.params
    }

    /// Compiles `q`, then seals a token with the plan's endurance and the
    /// next counter. A query that does not compile consumes no counter.
    pub fn make_token(&mut self, q: &str, catalog: &Catalog) -> Result<PendingQuery, ClientError> {
        let next = self.counter.checked_add(1).ok_or(ClientError::Counter { requested: u64::MAX, last: self.counter })?;
        self.make_token_at(q, catalog, next)
    }

    /// Like [`Self::make_token`] with an explicit counter, which must exceed
    /// every counter this context has used.
    pub fn make_token_at(&mut self, q: &str, catalog: &Catalog, counter: u64) -> Result<PendingQuery, ClientError> {
        if counter <= self.counter {
            return Err(ClientError::Counter { requested: counter, last: self.counter });
        }
        let plan = compile(q, catalog)?;
        let omega = compute_endurance(&plan);
        let tk = TokenContents { share: self.share.clone(), omega, counter }.seal(&self.params.pke_pub);
        self.counter = counter;
        Ok(PendingQuery { request: QueryRequest { q: q.into(), tk }, counter, omega, plan })
    }

    /// A token for reading the unlocked database directly. It carries no
    /// operator budget.
    pub fn read_token(&mut self) -> Result<(QueryToken, u64), ClientError> {
        let counter = self.counter + 1;
        let tk = TokenContents { share: self.share.clone(), omega: 0, counter }.seal(&self.params.pke_pub);
        self.counter = counter;
        Ok((tk, counter))
    }

    /// Decrypts the canonical result bytes after checking the signature.
    pub fn open_raw(&self, env: &ResponseEnvelope) -> Result<Vec<u8>, ClientError> {
        env.verify(&self.params.sig_pub).map_err(|_| ClientError::Proof)?;
        env.open_result(&self.share.result_key()).ok_or(ClientError::Integrity)
    }

    /// Decrypts the result and audits the trust proof against the pending
    /// request's plan.
    pub fn open_response(
        &self,
        pending: &PendingQuery,
        env: &ResponseEnvelope,
    ) -> Result<(StatePayload, AuditReport), ClientError> {
        let raw = zeroize::Zeroizing::new(self.open_raw(env)?);
        let payload = StatePayload::from_canonical_json(&raw).map_err(|_| ClientError::Integrity)?;
        let report = audit_proof(
            &Expectation { plan: &pending.plan, counter: pending.counter, sig_pub: &self.params.sig_pub },
            env,
            &raw,
        );
        Ok((payload, report))
    }
}

//! The untrusted application server: ciphertext storage, plan compilation,
//! and scheduling of trusted-core invocations, stand-alone or through
//! distributed workers.

mod attack;
mod deploy;
mod service;
mod store;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use deploy::{default_worker_pool, local_deployment, LocalClient, LocalHost};
pub use attack::{AttackScript, InputRef, Invocation, Mutation, Schedule};
pub use service::{opcode as service_opcode, ExecutionMode, LocalService, ServiceClient};
pub use store::{chunk_file_name, document_id, CollectionManifest, EncryptedStore, DEFAULT_CHUNK_SIZE};

use crate::crypto::Sealed;
use crate::enclave::{
    ChannelOffer, CoreError, PublicParams, QueryToken, Quote, ResponseEnvelope, SealedCollection,
    WorkerDescriptor,
};
use crate::ids::{ChannelId, CollectionId, DocumentId};
use crate::query::{parse, plan, Catalog, PlanError, PlanOp, QueryPlan};
use crate::wire::{Boundary, CoreClient, WorkerClient, WorkerHandle};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum HostError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity rejection: {0}")]
    Integrity(String),
    #[error("query rejected: {0}")]
    Query(String),
    #[error("script error: {0}")]
    Script(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl From<std::io::Error> for HostError {
    fn from(e: std::io::Error) -> Self {
        HostError::Storage(e.to_string())
    }
}

/// A query expression and the token that authorizes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub q: String,
    pub tk: QueryToken,
}

pub struct HostService<B> {
    core: CoreClient<B>,
    store: EncryptedStore,
    workers: Vec<WorkerHandle>,
    /// Queries run one at a time, matching the core's single session.
    queue: Mutex<()>,
}

impl<B: Boundary> HostService<B> {
    pub fn new(core: CoreClient<B>, store: EncryptedStore) -> Self {
        Self { core, store, workers: Vec::new(), queue: Mutex::new(()) }
    }

    pub fn with_workers(mut self, workers: Vec<WorkerHandle>) -> Self {
        self.workers = workers;
        self
    }

    pub fn core(&self) -> &CoreClient<B> {
        &self.core
    }

    pub fn store(&self) -> &EncryptedStore {
        &self.store
    }

    pub fn catalog(&self) -> Catalog {
        self.store.catalog()
    }

    pub fn public_params(&self) -> Result<PublicParams, HostError> {
        Ok(self.core.public_params()?)
    }

    /// Relays an owner's channel offer to the core.
    pub fn attest(&self, offer: &ChannelOffer) -> Result<Quote, HostError> {
        Ok(self.core.attest(offer)?)
    }

    pub fn provision(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, HostError> {
        Ok(self.core.provision(channel, msg)?)
    }

    pub fn update_policy(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, HostError> {
        Ok(self.core.update_policy(channel, msg)?)
    }

    pub fn create_collection(
        &self,
        name: &str,
        cid: CollectionId,
        schema: BTreeSet<String>,
    ) -> Result<(), HostError> {
        self.store.create(name, cid, schema)
    }

    pub fn upload(&self, cid: &CollectionId, did: &DocumentId, ct: &Sealed) -> Result<bool, HostError> {
        self.store.store(cid, did, ct)
    }

    fn lock_queue(&self) -> std::sync::MutexGuard<'_, ()> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Compiles `q` against the stored collections and gathers the
    /// ciphertexts its sources read.
    pub fn compile(&self, q: &str) -> Result<(QueryPlan, Vec<SealedCollection>), HostError> {
        let ast = parse(q).map_err(|e| HostError::Query(e.to_string()))?;
        let plan = plan(&ast, &self.catalog()).map_err(|e| match e {
            PlanError::UnknownCollection(c) => HostError::NotFound(format!("collection {c}")),
            other => HostError::Query(other.to_string()),
        })?;
        let mut sources = Vec::new();
        for node in &plan.nodes {
            if let PlanOp::Source { collection } = &node.op {
                sources.push(self.store.sealed_by_name(collection)?);
            }
        }
        Ok((plan, sources))
    }

    /// Unlocks, runs the plan's operators in node order, and finalizes.
    pub fn handle_query(&self, req: &QueryRequest) -> Result<ResponseEnvelope, HostError> {
        self.handle_query_adversarial(req, &AttackScript::default())
    }

    /// Like [`Self::handle_query`], with the invocation list rewritten by
    /// `script` first.
    pub fn handle_query_adversarial(
        &self,
        req: &QueryRequest,
        script: &AttackScript,
    ) -> Result<ResponseEnvelope, HostError> {
        let (plan, sources) = self.compile(&req.q)?;
        let mut schedule = Schedule::from_plan(&plan);
        for m in &script.mutations {
            schedule.apply(m)?;
        }
        let _guard = self.lock_queue();
        self.run(&schedule, &req.tk, &sources, |inv, inputs, _| {
            self.core.exec_operator(&inv.f_name, &inv.f_params, inputs)
        })
    }

    /// Unlocks the named collections (all stored ones when `None`) and
    /// returns the unlocked database itself.
    pub fn raw_read(
        &self,
        tk: &QueryToken,
        collections: Option<&[String]>,
    ) -> Result<ResponseEnvelope, HostError> {
        let names: Vec<String> = match collections {
            Some(names) => names.to_vec(),
            None => self.store.manifests().into_iter().map(|m| m.name).collect(),
        };
        let sources = names.iter().map(|n| self.store.sealed_by_name(n)).collect::<Result<Vec<_>, _>>()?;
        let schedule = Schedule { invocations: Vec::new(), finalize: None };
        let _guard = self.lock_queue();
        self.run(&schedule, tk, &sources, |_, _, _| Err(CoreError::State("nothing to execute".into())))
    }

    fn run(
        &self,
        schedule: &Schedule,
        tk: &QueryToken,
        sources: &[SealedCollection],
        mut exec: impl FnMut(&Invocation, &[u64], usize) -> Result<u64, CoreError>,
    ) -> Result<ResponseEnvelope, HostError> {
        let s0 = self.core.unlock(tk, sources)?;
        let outcome = (|| {
            let mut s_ids: Vec<u64> = Vec::with_capacity(schedule.invocations.len());
            for (k, inv) in schedule.invocations.iter().enumerate() {
                let inputs: Vec<u64> = inv
                    .inputs
                    .iter()
                    .map(|r| match r {
                        InputRef::Source => s0,
                        InputRef::Op(i) => s_ids[*i],
                    })
                    .collect();
                s_ids.push(exec(inv, &inputs, k)?);
            }
            self.core.finalize(schedule.finalize.map_or(s0, |i| s_ids[i]))
        })();
        if outcome.is_err() {
            self.core.abort()?;
        }
        Ok(outcome?)
    }

    /// Attests every worker in the pool through the broker and hands each
    /// the common key. Fails on the first worker that does not attest.
    pub fn admit_workers(&self) -> Result<(), HostError> {
        for w in &self.workers {
            let d = w.descriptor();
            let client = WorkerClient::new(w);
            let offer = self.core.worker_challenge(&d.worker_id)?;
            let quote = client.attest(&offer)?;
            let sealed_key = self.core.admit_worker(d, &quote)?;
            client.install_key(&sealed_key)?;
        }
        Ok(())
    }

    /// Runs the query with every operator dispatched to a worker that
    /// implements it. The pool is attested before anything is unlocked.
    pub fn distributed_execute(&self, req: &QueryRequest) -> Result<ResponseEnvelope, HostError> {
        let (plan, sources) = self.compile(&req.q)?;
        let schedule = Schedule::from_plan(&plan);
        let _guard = self.lock_queue();
        self.admit_workers()?;
        let assignment = assign_workers(&schedule, self.workers.iter().map(WorkerHandle::descriptor))?;
        self.run(&schedule, &req.tk, &sources, |inv, inputs, k| {
            let w = &self.workers[assignment[k]];
            let task = self.core.begin_remote(&w.descriptor().worker_id, &inv.f_name, &inv.f_params, inputs)?;
            let result = WorkerClient::new(w).execute(&task)?;
            self.core.complete_remote(&result)
        })
    }

    /// Worker ids chosen for each operator of `q`, in execution order.
    pub fn worker_assignment(&self, q: &str) -> Result<Vec<String>, HostError> {
        let (plan, _) = self.compile(q)?;
        let schedule = Schedule::from_plan(&plan);
        let descriptors: Vec<&WorkerDescriptor> = self.workers.iter().map(WorkerHandle::descriptor).collect();
        Ok(assign_workers(&schedule, descriptors.iter().copied())?
            .into_iter()
            .map(|i| descriptors[i].worker_id.clone())
            .collect())
    }
}

/// For each invocation, the first worker implementing its operator that has
/// not been used yet in this schedule, falling back to the first match.
fn assign_workers<'a>(
    schedule: &Schedule,
    pool: impl Iterator<Item = &'a WorkerDescriptor>,
) -> Result<Vec<usize>, HostError> {
    let pool: Vec<&WorkerDescriptor> = pool.collect();
    let mut used = vec![false; pool.len()];
    let mut out = Vec::with_capacity(schedule.invocations.len());
    for inv in &schedule.invocations {
        let matching: Vec<usize> =
            (0..pool.len()).filter(|&i| pool[i].op.name() == inv.f_name).collect();
        let pick = matching
            .iter()
            .copied()
            .find(|&i| !used[i])
            .or_else(|| matching.first().copied())
            .ok_or_else(|| HostError::NotFound(format!("no worker implements {}", inv.f_name)))?;
        used[pick] = true;
        out.push(pick);
    }
    Ok(out)
}

/// Shared handle type for services reached from several threads.
pub type SharedHost<B> = Arc<HostService<B>>;

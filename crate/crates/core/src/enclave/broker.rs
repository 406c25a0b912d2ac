//! Distributed mode. The core acts as broker: it attests workers, hands them
//! a common key, ships sealed tasks out, and records the states they return.
//! Workers hold no session state and implement exactly one operator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::attest::{self, worker_measurement, Channel, ChannelInitiator, ChannelOffer, Party, Quote};
use super::{state_err, CoreError, FuncRecord, TrustedCore};
use crate::crypto::{AeadKey, Digest256, Sealed, SigningKey};
use crate::operator::{Operator, OperatorKind, StatePayload};

const COMMON_KEY_KIND: &[u8] = b"common-key";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub worker_id: String,
    pub node_id: String,
    pub op: OperatorKind,
}

impl WorkerDescriptor {
    pub fn new(worker_id: &str, node_id: &str, op: OperatorKind) -> Self {
        Self { worker_id: worker_id.into(), node_id: node_id.into(), op }
    }

    fn subject(&self) -> String {
        format!("worker {} on {} ({})", self.worker_id, self.node_id, self.op.name())
    }
}

pub(super) struct PendingTask {
    task_id: u64,
    worker_id: String,
    func: FuncRecord,
    inputs: Vec<u64>,
}

#[derive(Default)]
pub(super) struct BrokerState {
    common_key: Option<AeadKey>,
    offers: BTreeMap<String, ChannelInitiator>,
    workers: BTreeMap<String, WorkerDescriptor>,
    pub(super) pending: Option<PendingTask>,
    next_task: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskMessage {
    task_id: u64,
    f_name: String,
    f_params: serde_json::Value,
    /// Canonical payload encodings of the input states.
    inputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ResultMessage {
    task_id: u64,
    outcome: Result<String, String>,
}

fn task_aad(worker_id: &str) -> Vec<u8> {
    [b"qshield/task/v1\0".as_slice(), worker_id.as_bytes()].concat()
}

fn result_aad(worker_id: &str) -> Vec<u8> {
    [b"qshield/task-result/v1\0".as_slice(), worker_id.as_bytes()].concat()
}

impl TrustedCore {
    /// Starts attesting a worker: returns the broker's channel offer.
    pub fn worker_challenge(&mut self, worker_id: &str) -> Result<ChannelOffer, CoreError> {
        self.identity()?;
        let init = ChannelInitiator::new(Party::Broker);
        let offer = init.offer().clone();
        self.broker.offers.insert(worker_id.to_owned(), init);
        Ok(offer)
    }

    /// Verifies a worker's quote against the expected measurement for its
    /// operator and returns the common key sealed for it.
    pub fn admit_worker(
        &mut self,
        descriptor: &WorkerDescriptor,
        quote: &Quote,
    ) -> Result<Sealed, CoreError> {
        let init = self
            .broker
            .offers
            .remove(&descriptor.worker_id)
            .ok_or_else(|| state_err(format!("no challenge issued to {}", descriptor.worker_id)))?;
        let channel = init.finish(quote, &worker_measurement(descriptor.op), None)?;
        if quote.subject != descriptor.subject() {
            return Err(CoreError::Attestation("quote describes a different worker".into()));
        }
        let key = self.broker.common_key.get_or_insert_with(AeadKey::generate);
        let encoded = Zeroizing::new(hex::encode(key.as_bytes()));
        let sealed = channel.seal(COMMON_KEY_KIND, 0, &*encoded);
        self.broker.workers.insert(descriptor.worker_id.clone(), descriptor.clone());
        Ok(sealed)
    }

    /// Checks an invocation exactly as [`Self::exec_operator`] does and
    /// returns the task sealed for `worker_id`. One task may be in flight.
    pub fn begin_remote(
        &mut self,
        worker_id: &str,
        f_name: &str,
        f_params: &serde_json::Value,
        inputs: &[u64],
    ) -> Result<Sealed, CoreError> {
        if self.broker.pending.is_some() {
            return Err(state_err("a remote invocation is already pending"));
        }
        let op = self.check_invocation(f_name, f_params, inputs)?;
        let descriptor = self
            .broker
            .workers
            .get(worker_id)
            .ok_or_else(|| CoreError::Attestation(format!("worker {worker_id} is not attested")))?;
        if descriptor.op != op.kind() {
            return Err(state_err(format!(
                "worker {worker_id} implements {}, not {f_name}",
                descriptor.op.name()
            )));
        }
        let payloads = self
            .input_payloads(inputs)?
            .into_iter()
            .map(|p| String::from_utf8(p.to_canonical_json()).expect("JSON is UTF-8"))
            .collect();
        let task_id = self.broker.next_task;
        self.broker.next_task += 1;
        let msg = TaskMessage {
            task_id,
            f_name: op.name().into(),
            f_params: op.params_json(),
            inputs: payloads,
        };
        let pt = Zeroizing::new(serde_json::to_vec(&msg).expect("tasks serialize"));
        let key = self.broker.common_key.as_ref().expect("set when a worker is admitted");
        let sealed = key.seal(&pt, &task_aad(worker_id));
        let func = FuncRecord {
            f_name: msg.f_name,
            f_params: msg.f_params,
            worker: Some(worker_id.to_owned()),
        };
        self.broker.pending = Some(PendingTask {
            task_id,
            worker_id: worker_id.to_owned(),
            func,
            inputs: inputs.to_vec(),
        });
        Ok(sealed)
    }

    /// Records the state a worker returned for the pending task.
    pub fn complete_remote(&mut self, sealed: &Sealed) -> Result<u64, CoreError> {
        let pending = self.broker.pending.take().ok_or_else(|| state_err("no pending remote invocation"))?;
        let key = self.broker.common_key.as_ref().expect("set when a worker is admitted");
        let pt = Zeroizing::new(
            key.open(sealed, &result_aad(&pending.worker_id))
                .map_err(|_| CoreError::Channel("worker result failed authentication".into()))?,
        );
        let msg: ResultMessage = serde_json::from_slice(&pt)
            .map_err(|_| CoreError::Channel("malformed worker result".into()))?;
        if msg.task_id != pending.task_id {
            return Err(CoreError::Channel("worker result answers a different task".into()));
        }
        let payload = msg.outcome.map_err(CoreError::Operator)?;
        let payload = StatePayload::from_canonical_json(payload.as_bytes())
            .map_err(|_| CoreError::Integrity("malformed worker payload".into()))?;
        // Finalize and abort clear the pending task, so the session that
        // issued it is still live here.
        let session = self.session.as_mut().ok_or_else(|| state_err("no session"))?.active()?;
        if session.budget == 0 {
            return Err(CoreError::Endurance);
        }
        Ok(session.push(pending.inputs, pending.func, payload))
    }
}

/// A stateless operator enclave.
pub struct Worker {
    descriptor: WorkerDescriptor,
    measurement: Digest256,
    sig: SigningKey,
    pairwise: Option<Channel>,
    common: Option<AeadKey>,
}

impl Worker {
    pub fn new(descriptor: WorkerDescriptor) -> Self {
        let measurement = worker_measurement(descriptor.op);
        Self::with_measurement(descriptor, measurement)
    }

    /// A worker reporting a different measurement, standing in for modified
    /// code.
    pub fn with_measurement(descriptor: WorkerDescriptor, measurement: Digest256) -> Self {
        Self { descriptor, measurement, sig: SigningKey::generate(), pairwise: None, common: None }
    }

    pub fn descriptor(&self) -> &WorkerDescriptor {
        &self.descriptor
    }

    pub fn attest(&mut self, offer: &ChannelOffer) -> Result<Quote, CoreError> {
        if offer.party != Party::Broker {
            return Err(CoreError::Attestation("workers only accept broker channels".into()));
        }
        let (quote, channel) =
            attest::respond(offer, self.measurement, &self.descriptor.subject(), &self.sig);
        self.pairwise = Some(channel);
        Ok(quote)
    }

    pub fn install_key(&mut self, sealed: &Sealed) -> Result<(), CoreError> {
        let channel = self.pairwise.as_ref().ok_or_else(|| state_err("worker is not attested"))?;
        let (_, encoded): (u64, Zeroizing<String>) = channel.open(COMMON_KEY_KIND, sealed)?;
        let mut bytes = Zeroizing::new([0u8; 32]);
        hex::decode_to_slice(encoded.as_bytes(), bytes.as_mut())
            .map_err(|_| CoreError::Channel("malformed common key".into()))?;
        self.common = Some(AeadKey::from_bytes(*bytes));
        Ok(())
    }

    /// Opens a task, runs the operator, and seals the outcome.
    pub fn execute(&self, task: &Sealed) -> Result<Sealed, CoreError> {
        let key = self.common.as_ref().ok_or_else(|| state_err("worker has no common key"))?;
        let id = &self.descriptor.worker_id;
        let pt = Zeroizing::new(
            key.open(task, &task_aad(id))
                .map_err(|_| CoreError::Channel("task failed authentication".into()))?,
        );
        let msg: TaskMessage =
            serde_json::from_slice(&pt).map_err(|_| CoreError::Channel("malformed task".into()))?;
        let outcome = self.run(&msg);
        let out = Zeroizing::new(
            serde_json::to_vec(&ResultMessage { task_id: msg.task_id, outcome })
                .expect("results serialize"),
        );
        Ok(key.seal(&out, &result_aad(id)))
    }

    fn run(&self, msg: &TaskMessage) -> Result<String, String> {
        if msg.f_name != self.descriptor.op.name() {
            return Err(format!("worker implements {}, not {}", self.descriptor.op.name(), msg.f_name));
        }
        let op = Operator::from_parts(&msg.f_name, msg.f_params.clone()).map_err(|e| e.to_string())?;
        let inputs = msg
            .inputs
            .iter()
            .map(|s| StatePayload::from_canonical_json(s.as_bytes()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| "malformed input payload".to_string())?;
        let refs: Vec<&StatePayload> = inputs.iter().collect();
        let out = op.apply(&refs).map_err(|e| e.to_string())?;
        Ok(String::from_utf8(out.to_canonical_json()).expect("JSON is UTF-8"))
    }
}

//! In-process deployments: one trusted core, an optional worker pool, and a
//! host service in front of them.

use std::sync::Arc;

use super::{EncryptedStore, ExecutionMode, HostError, HostService, LocalService, ServiceClient};
use crate::enclave::{TrustedCore, Worker, WorkerDescriptor};
use crate::operator::OperatorKind;
use crate::wire::{CoreClient, EnclaveHandle, WorkerHandle};

pub type LocalHost = HostService<EnclaveHandle>;
pub type LocalClient = ServiceClient<LocalService<EnclaveHandle>>;

/// Five workers on three nodes, one per operator of the join-aggregate
/// example plus a spare projection worker.
pub fn default_worker_pool() -> Vec<WorkerHandle> {
    [
        ("E1", "N1", OperatorKind::Selection),
        ("E2", "N2", OperatorKind::Projection),
        ("E3", "N2", OperatorKind::Projection),
        ("E4", "N3", OperatorKind::Join),
        ("E5", "N1", OperatorKind::Aggregation),
    ]
    .into_iter()
    .map(|(id, node, op)| WorkerHandle::new(Worker::new(WorkerDescriptor::new(id, node, op))))
    .collect()
}

/// Starts and initializes a core at `lambda` bits, and wraps it in a host
/// service over `store`.
pub fn local_deployment(
    lambda: u32,
    store: EncryptedStore,
    workers: Vec<WorkerHandle>,
    mode: ExecutionMode,
) -> Result<(Arc<LocalHost>, LocalClient), HostError> {
    let core = CoreClient::new(EnclaveHandle::new(TrustedCore::new()));
    core.init(lambda)?;
    let host = Arc::new(HostService::new(core, store).with_workers(workers));
    let client = ServiceClient::new(LocalService::new(Arc::clone(&host), mode));
    Ok((host, client))
}

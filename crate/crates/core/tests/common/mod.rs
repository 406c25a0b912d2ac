#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qshield_core::client::{catalog_of, OwnerContext, UploadTarget, UserContext};
use qshield_core::document::{Document, Value};
use qshield_core::enclave::core_measurement;
use qshield_core::host::{
    default_worker_pool, local_deployment, EncryptedStore, ExecutionMode, LocalClient, LocalHost,
};
use qshield_core::crypto::ShareSet;
use qshield_core::enclave::{ChannelInitiator, Party, Provisioning, TrustedCore, PROVISION_KIND};
use qshield_core::ids::CollectionId;
use qshield_core::policy::{Policy, PolicyUpdate};
use qshield_core::query::Catalog;

pub mod mutants;

pub const JOIN_SUM: &str = "SELECT SUM(A4) FROM C1 JOIN C2 ON C1.A3 = C2.A3 WHERE C1.A1 <= 10";

/// Queries that succeed on [`join_sum_world`] data, used as mutation targets.
pub const MUTATION_QUERIES: [&str; 10] = [
    JOIN_SUM,
    "SELECT A1 FROM C1 WHERE A1 <= 10",
    "SELECT A3, A4 FROM C2 WHERE A2 > 20",
    "SELECT COUNT(A5) FROM C1 WHERE A3 = 2",
    "SELECT C1.A1, C2.A4 FROM C1 JOIN C2 ON C1.A3 = C2.A3",
    "SELECT MAX(A4) FROM C2",
    "SELECT AVG(A5) FROM C1 JOIN C2 ON C1.A3 = C2.A3 WHERE C2.A2 >= 0",
    "SELECT A2, A5 FROM C2 JOIN C1 ON C2.A3 = C1.A3 WHERE C1.A1 < 25",
    "SELECT MIN(A1) FROM C1 WHERE A5 > -1000",
    "SELECT COUNT(A2) FROM C2 JOIN C1 ON C2.A3 = C1.A3",
];

pub struct World {
    pub host: Arc<LocalHost>,
    pub svc: LocalClient,
    pub owner: OwnerContext,
}

impl World {
    pub fn new(users: usize) -> Self {
        Self::with(users, EncryptedStore::in_memory(), ExecutionMode::Standalone, false)
    }

    pub fn with(users: usize, store: EncryptedStore, mode: ExecutionMode, workers: bool) -> Self {
        let pool = if workers { default_worker_pool() } else { Vec::new() };
        let (host, svc) = local_deployment(128, store, pool, mode).unwrap();
        let mut owner = OwnerContext::setup(128, users).unwrap();
        owner.connect(&svc, &core_measurement()).unwrap();
        owner.provision(&svc).unwrap();
        Self { host, svc, owner }
    }

    pub fn user(&self, i: usize) -> UserContext {
        UserContext::new(self.owner.user_share(i).unwrap().clone(), self.owner.params().unwrap().clone())
    }

    /// Uploads `docs` as a new collection granted to the listed users.
    pub fn upload(&mut self, name: &str, docs: &[Document], users: &[usize]) {
        let uids: Vec<_> = users.iter().map(|&i| self.owner.user_share(i).unwrap().uid()).collect();
        self.owner
            .upload(&self.svc, UploadTarget::New { name, authorized: &uids }, docs)
            .unwrap();
    }

    pub fn catalog(&self) -> Catalog {
        catalog_of(&self.svc).unwrap()
    }
}

/// C1[A1, A3, A5] and C2[A2, A3, A4] with `n` integer documents each.
pub fn join_sum_data(n: usize, seed: u64) -> (Vec<Document>, Vec<Document>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = (0..n)
        .map(|_| {
            Document::new()
                .with("A1", rng.gen_range(0..30i64))
                .with("A3", rng.gen_range(0..10i64))
                .with("A5", rng.gen_range(-1000..1000i64))
        })
        .collect();
    let c2 = (0..n)
        .map(|_| {
            Document::new()
                .with("A2", rng.gen_range(0..100i64))
                .with("A3", rng.gen_range(0..10i64))
                .with("A4", rng.gen_range(-1000..1000i64))
        })
        .collect::<Vec<Document>>();
    // At least one joined row passes the filter, so the sum is defined.
    let mut c1: Vec<Document> = c1;
    if let (Some(a), Some(b)) = (c1.first_mut(), c2.first()) {
        a.insert("A1", 0i64);
        a.insert("A3", b.get("A3").unwrap().clone());
    }
    (c1, c2)
}

fn int(d: &Document, a: &str) -> i64 {
    match d.get(a) {
        Some(Value::Int(v)) => *v,
        other => panic!("{a} is not an integer: {other:?}"),
    }
}

/// Nested-loop evaluation of the join-aggregate example.
pub fn join_sum_oracle(c1: &[Document], c2: &[Document]) -> i64 {
    let mut by_key: BTreeMap<i64, i64> = BTreeMap::new();
    for d in c2 {
        *by_key.entry(int(d, "A3")).or_default() += int(d, "A4");
    }
    let mut sum = 0;
    for d in c1.iter().filter(|d| int(d, "A1") <= 10) {
        sum += by_key.get(&int(d, "A3")).copied().unwrap_or(0);
    }
    sum
}

/// Loads the example data granted to user 1 and returns it.
pub fn join_sum_world(n: usize, seed: u64, mode: ExecutionMode, workers: bool) -> (World, Vec<Document>, Vec<Document>) {
    let mut w = World::with(2, EncryptedStore::in_memory(), mode, workers);
    let (c1, c2) = join_sum_data(n, seed);
    w.upload("C1", &c1, &[1]);
    w.upload("C2", &c2, &[1]);
    (w, c1, c2)
}

/// Provisions a bare core with `set`'s enclave share and a policy granting
/// the first user the named collections.
pub fn provision_core(core: &mut TrustedCore, set: &ShareSet, collections: &[&str]) {
    let init = ChannelInitiator::new(Party::Owner);
    let quote = core.attest(init.offer()).unwrap();
    let channel = init.finish(&quote, &core_measurement(), None).unwrap();
    let mut policy = Policy::new();
    let cids = collections.iter().map(|c| CollectionId::for_name(c)).collect();
    policy.apply(&PolicyUpdate::Add { uid: set.users[0].uid(), cids }).unwrap();
    let body = Provisioning { enclave_share: set.enclave.to_bytes(), policy };
    core.provision(&channel.id(), &channel.seal(PROVISION_KIND, 1, &body)).unwrap();
}

//! Timing sweeps for the operators inside the trusted core and for share
//! decryption.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use qshield_core::crypto::sharing::{self, setup, ShareSet, TaggedCiphertext};
use qshield_core::document::{AggregateFn, AttrRef, CmpOp, Document, Predicate};
use qshield_core::enclave::{
    core_measurement, ChannelInitiator, Party, Provisioning, SealedCollection, TokenContents, TrustedCore,
    PROVISION_KIND,
};
use qshield_core::ids::CollectionId;
use qshield_core::operator::Operator;
use qshield_core::policy::{Policy, PolicyUpdate};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub operation: String,
    pub size: usize,
    pub micros: u128,
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from("operation,size,micros\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.operation, r.size, r.micros));
    }
    out
}

fn grant_all(set: &ShareSet, cids: impl IntoIterator<Item = CollectionId>) -> Policy {
    let mut pol = Policy::new();
    pol.apply(&PolicyUpdate::Add { uid: set.users[0].uid(), cids: cids.into_iter().collect() })
        .expect("fresh policy accepts the first user");
    pol
}

fn provisioned_core(set: &ShareSet, policy: Policy) -> Result<(TrustedCore, qshield_core::enclave::PublicParams)> {
    let mut core = TrustedCore::new();
    let params = core.init(128)?;
    let init = ChannelInitiator::new(Party::Owner);
    let quote = core.attest(init.offer())?;
    let channel = init.finish(&quote, &core_measurement(), Some(&params.sig_pub))?;
    let body = Provisioning { enclave_share: set.enclave.to_bytes(), policy };
    core.provision(&channel.id(), &channel.seal(PROVISION_KIND, 1, &body))?;
    Ok((core, params))
}

fn sealed(set: &ShareSet, name: &str, attrs: [&str; 3], n: usize) -> Result<SealedCollection> {
    let mut rng = rand::thread_rng();
    let cid = CollectionId::for_name(name);
    let docs = (0..n)
        .map(|i| {
            let d = Document::new()
                .with(attrs[0], i as i64)
                .with(attrs[1], rng.gen_range(0..4 * n.max(1) as i64))
                .with(attrs[2], rng.gen_range(-1000..1000i64));
            sharing::encrypt_document(&set.key, &cid, &d.to_canonical_json())
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(SealedCollection { name: name.into(), cid, docs })
}

/// Unlock, projection, selection, aggregation and join over `n` documents
/// per collection, best of `reps` runs each.
pub fn operators(sizes: &[usize], reps: usize) -> Result<Vec<Row>> {
    let set = setup(128, 1)?;
    let policy = grant_all(&set, [CollectionId::for_name("C1"), CollectionId::for_name("C2")]);
    let (mut core, params) = provisioned_core(&set, policy)?;
    let c1 = Some("C1".to_string());
    let ops = [
        ("projection", Operator::Projection { source: c1.clone(), attributes: ["A1", "A3"].map(String::from).into() }),
        (
            "selection",
            Operator::Selection {
                source: c1.clone(),
                predicate: Predicate::literal(AttrRef::new("C1", "A1"), CmpOp::Le, 0i64),
            },
        ),
        ("aggregation", Operator::Aggregation { source: c1, function: AggregateFn::Sum, attribute: "A5".into() }),
    ];
    let left = Operator::Projection { source: Some("C1".into()), attributes: ["A1", "A3"].map(String::from).into() };
    let right = Operator::Projection { source: Some("C2".into()), attributes: ["A3", "A4"].map(String::from).into() };
    let join = Operator::Join { predicate: Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3")) };

    let mut counter = 0;
    let mut rows = Vec::new();
    for &n in sizes {
        let collections = [sealed(&set, "C1", ["A1", "A3", "A5"], n)?, sealed(&set, "C2", ["A2", "A3", "A4"], n)?];
        let mut best = vec![Duration::MAX; ops.len() + 2];
        for _ in 0..reps.max(1) {
            counter += 1;
            let tk = TokenContents { share: set.users[0].clone(), omega: 6, counter }.seal(&params.pke_pub);
            let t = Instant::now();
            core.unlock(&tk, &collections)?;
            best[0] = best[0].min(t.elapsed());
            for (k, (_, op)) in ops.iter().enumerate() {
                let t = Instant::now();
                core.exec_operator(op.name(), &op.params_json(), &[0])?;
                best[k + 1] = best[k + 1].min(t.elapsed());
            }
            let l = core.exec_operator(left.name(), &left.params_json(), &[0])?;
            let r = core.exec_operator(right.name(), &right.params_json(), &[0])?;
            let t = Instant::now();
            core.exec_operator(join.name(), &join.params_json(), &[l, r])?;
            best[ops.len() + 1] = best[ops.len() + 1].min(t.elapsed());
            core.abort();
        }
        let labels = std::iter::once("unlock").chain(ops.iter().map(|(l, _)| *l)).chain(["join"]);
        rows.extend(labels.zip(&best).map(|(l, t)| Row { operation: l.into(), size: n, micros: t.as_micros() }));
    }
    Ok(rows)
}

/// Share decryption of a single `len`-byte document, best of `reps` runs.
pub fn decrypt(sizes: &[usize], reps: usize) -> Result<Vec<Row>> {
    let set = setup(128, 1)?;
    let cid = CollectionId::for_name("D");
    let policy = grant_all(&set, [cid]);
    let mut rows = Vec::new();
    for &len in sizes {
        let ct = TaggedCiphertext { cid, ct: sharing::encrypt_document(&set.key, &cid, &vec![0x5a; len])? };
        let mut best = Duration::MAX;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            sharing::decrypt(&policy, &set.enclave, &set.users[0], std::slice::from_ref(&ct))?;
            best = best.min(t.elapsed());
        }
        rows.push(Row { operation: "decrypt".into(), size: len, micros: best.as_micros() });
    }
    Ok(rows)
}

//! Acceptance run: each criterion prints one PASS/FAIL line, and the test
//! fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::mutants::{mutants, run_mutant, Outcome};
use common::{join_sum_oracle, join_sum_world, World, JOIN_SUM, MUTATION_QUERIES};
use qshield_core::client::{ClientError, UploadTarget};
use qshield_core::crypto::sharing::{self, reconstruct_key, setup, TaggedCiphertext};
use qshield_core::document::{
    aggregate, chunk, join, project, select, AggregateFn, AttrRef, CmpOp, Collection, Document, Predicate, Value,
};
use qshield_core::enclave::{CoreError, SealedCollection, TokenContents, TrustedCore};
use qshield_core::host::{chunk_file_name, EncryptedStore, ExecutionMode, HostError, Schedule};
use qshield_core::ids::CollectionId;
use qshield_core::operator::{Operator, StatePayload};
use qshield_core::policy::PolicyUpdate;
use qshield_core::wire::decode_blobs;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Verdict {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn min_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn int(d: &Document, a: &str) -> i64 {
    match d.get(a) {
        Some(Value::Int(v)) => *v,
        other => panic!("{a}: {other:?}"),
    }
}

fn crypto_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ns = [1usize, 2, 16, 64];
    let mut mismatches = 0;
    let mut false_decrypts = 0;
    let mut shares_checked = 0;
    let mut prev: Option<sharing::ShareSet> = None;
    for k in 0..200 {
        let set = setup(128, ns[k % ns.len()]).unwrap();
        for user in &set.users {
            shares_checked += 1;
            if reconstruct_key(&set.enclave, user).unwrap() != set.key {
                mismatches += 1;
            }
        }
        if let Some(other) = &prev {
            let msg: Vec<u8> = (0..rng.gen_range(1..64)).map(|_| rng.gen()).collect();
            let ct = sharing::encrypt(&set.key, &msg).unwrap();
            for user in &other.users {
                if let Ok(key) = reconstruct_key(&set.enclave, user) {
                    if sharing::open(&key, &ct).is_ok() {
                        false_decrypts += 1;
                    }
                }
            }
        }
        prev = Some(set);
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && false_decrypts == 0 && elapsed < Duration::from_secs(60),
        format!("200 setups, {shares_checked} shares reconstruct sk, 0 cross-setup decrypts, {elapsed:.1?}"),
        format!("{mismatches} mismatches, {false_decrypts} false decrypts, {elapsed:.1?}"),
    )
}

fn join_sum_end_to_end() -> Verdict {
    let start = Instant::now();
    let (w, c1, c2) = join_sum_world(1000, 2024, ExecutionMode::Standalone, false);
    let mut user = w.user(1);
    let pending = user.make_token(JOIN_SUM, &w.catalog()).map_err(|e| e.to_string())?;
    let env = w.svc.query(&pending.request, None).map_err(|e| e.to_string())?;
    let (result, report) = user.open_response(&pending, &env).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let expected = join_sum_oracle(&c1, &c2);
    check(
        result == StatePayload::Scalar(Value::Int(expected)) && report.passed() && elapsed < Duration::from_secs(10),
        format!("SUM = {expected} matches the oracle, audit {report}, {elapsed:.1?}"),
        format!("got {result:?}, oracle {expected}, audit {report}, {elapsed:.1?}"),
    )
}

fn random_collection(rng: &mut ChaCha8Rng, name: &str, attrs: [&str; 3]) -> Collection {
    let n = rng.gen_range(0..=50);
    let docs = (0..n)
        .map(|_| attrs.iter().fold(Document::new(), |d, a| d.with(*a, rng.gen_range(-5..10i64))))
        .collect();
    let schema = attrs.iter().map(|a| a.to_string()).collect();
    Collection::new(name, CollectionId::for_name(name), schema, docs).unwrap()
}

fn operator_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
    let mut failures = Vec::new();
    for round in 0..100 {
        let a = random_collection(&mut rng, "L", ["A1", "A3", "A5"]);
        let b = random_collection(&mut rng, "R", ["A2", "A3", "A4"]);

        // join = filter over the cross product
        let joined = join(&a, &b, &Predicate::join_eq(AttrRef::new("L", "A3"), AttrRef::new("R", "A3"))).unwrap();
        let mut cross = Vec::new();
        for d in a.docs() {
            for e in b.docs() {
                if int(d, "A3") == int(e, "A3") {
                    cross.push(d.clone().with("A2", int(e, "A2")).with("A4", int(e, "A4")));
                }
            }
        }
        if joined.docs() != cross.as_slice() {
            failures.push(format!("join in round {round}"));
        }

        let attr = ["A1", "A3", "A5"][rng.gen_range(0..3)];
        let op = ops[rng.gen_range(0..ops.len())];
        let lit = rng.gen_range(-5..10i64);
        let selected = select(&a, &Predicate::literal(AttrRef::new("L", attr), op, lit)).unwrap();
        let direct: Vec<Document> = a
            .docs()
            .iter()
            .filter(|d| {
                let x = int(d, attr);
                match op {
                    CmpOp::Eq => x == lit,
                    CmpOp::Ne => x != lit,
                    CmpOp::Lt => x < lit,
                    CmpOp::Le => x <= lit,
                    CmpOp::Gt => x > lit,
                    CmpOp::Ge => x >= lit,
                }
            })
            .cloned()
            .collect();
        if selected.docs() != direct.as_slice() {
            failures.push(format!("selection in round {round}"));
        }

        let keep: BTreeSet<String> = ["A1", "A3", "A5"].iter().filter(|_| rng.gen_bool(0.6)).map(|s| s.to_string()).collect();
        if !keep.is_empty() {
            let projected = project(&a, &keep).unwrap();
            let direct: Vec<Document> = a
                .docs()
                .iter()
                .map(|d| d.iter().filter(|(k, _)| keep.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect())
                .collect();
            if projected.docs() != direct.as_slice() || projected.schema() != &keep {
                failures.push(format!("projection in round {round}"));
            }
        }

        let xs: Vec<i64> = a.docs().iter().map(|d| int(d, attr)).collect();
        for f in [AggregateFn::Sum, AggregateFn::Avg, AggregateFn::Count, AggregateFn::Min, AggregateFn::Max] {
            let got = aggregate(&a, f, attr).ok();
            let want = match f {
                AggregateFn::Count => Some(Value::Int(xs.len() as i64)),
                _ if xs.is_empty() => None,
                AggregateFn::Sum => Some(Value::Int(xs.iter().sum())),
                AggregateFn::Avg => Some(Value::Float(xs.iter().sum::<i64>() as f64 / xs.len() as f64)),
                AggregateFn::Min => xs.iter().min().map(|v| Value::Int(*v)),
                AggregateFn::Max => xs.iter().max().map(|v| Value::Int(*v)),
            };
            if got != want {
                failures.push(format!("{} in round {round}", f.keyword()));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(30),
        format!("100 random collections, join/select/project/aggregate exact, {elapsed:.1?}"),
        format!("mismatches: {failures:?}, {elapsed:.1?}"),
    )
}

fn threat_detection() -> Verdict {
    let (w, _, _) = join_sum_world(12, 4, ExecutionMode::Standalone, false);
    let mut user = w.user(1);
    let catalog = w.catalog();
    let mut by_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut undetected = Vec::new();
    let mut accepted = Vec::new();
    let mut stale_envelopes = Vec::new();
    for q in MUTATION_QUERIES {
        let faithful = user.make_token(q, &catalog).map_err(|e| e.to_string())?;
        let env = w.svc.query(&faithful.request, None).map_err(|e| e.to_string())?;
        if !user.open_response(&faithful, &env).map_err(|e| e.to_string())?.1.passed() {
            return Err(format!("faithful run of {q} failed its audit"));
        }
        accepted.push(faithful.request.clone());
        stale_envelopes.push(env);
        for (class, script) in mutants(&Schedule::from_plan(&faithful.plan)) {
            let pending = user.make_token(q, &catalog).map_err(|e| e.to_string())?;
            *by_class.entry(class).or_default() += 1;
            if run_mutant(&w.svc, &user, &pending, &script) == Outcome::Undetected {
                undetected.push(format!("{q}: {script:?}"));
            }
        }
    }
    let total: usize = by_class.values().sum();

    let replays_rejected = accepted
        .iter()
        .filter(|req| w.svc.query(req, None) == Err(HostError::Core(CoreError::Replay)))
        .count();

    // A response from an earlier session handed back for a new request.
    let mut stale_caught = 0;
    for (env, q) in stale_envelopes.iter().zip(MUTATION_QUERIES) {
        let pending = user.make_token(q, &catalog).map_err(|e| e.to_string())?;
        match user.open_response(&pending, env) {
            Ok((_, report)) if report.failure() == Some("freshness") => stale_caught += 1,
            _ => {}
        }
    }
    check(
        total >= 500
            && undetected.is_empty()
            && replays_rejected == accepted.len()
            && stale_caught == stale_envelopes.len(),
        format!(
            "{total} mutants {by_class:?}, 0 undetected; {replays_rejected}/{} replays rejected; {stale_caught}/{} stale envelopes fail freshness",
            accepted.len(),
            stale_envelopes.len()
        ),
        format!("{total} mutants, undetected: {undetected:?}; replays rejected {replays_rejected}/{}; stale {stale_caught}", accepted.len()),
    )
}

fn keyed(n: usize, key_range: i64, seed: u64, name: &str, attrs: [&str; 3]) -> Collection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n)
        .map(|i| {
            Document::new()
                .with(attrs[0], i as i64)
                .with(attrs[1], rng.gen_range(0..key_range))
                .with(attrs[2], rng.gen_range(0..1000i64))
        })
        .collect();
    Collection::new(name, CollectionId::for_name(name), attrs.iter().map(|a| a.to_string()).collect(), docs).unwrap()
}

fn performance() -> Verdict {
    // (a) single invocations over 10,000 documents inside the core
    let set = setup(128, 1).unwrap();
    let mut core = TrustedCore::new();
    let params = core.init(128).unwrap();
    common::provision_core(&mut core, &set, &["C1"]);
    let c1 = keyed(10_000, 100, 5, "C1", ["A1", "A3", "A5"]);
    let cid = c1.cid();
    let docs = c1
        .docs()
        .iter()
        .map(|d| sharing::encrypt_document(&set.key, &cid, &d.to_canonical_json()).unwrap())
        .collect();
    let sealed = SealedCollection { name: "C1".into(), cid, docs };
    let tk = TokenContents { share: set.users[0].clone(), omega: 3, counter: 1 }.seal(&params.pke_pub);
    core.unlock(&tk, &[sealed]).map_err(|e| e.to_string())?;
    let source = Some("C1".to_string());
    let invocations = [
        Operator::Projection { source: source.clone(), attributes: ["A3".to_string()].into() },
        Operator::Selection {
            source: source.clone(),
            predicate: Predicate::literal(AttrRef::new("C1", "A1"), CmpOp::Le, 5000i64),
        },
        Operator::Aggregation { source, function: AggregateFn::Sum, attribute: "A5".into() },
    ];
    let mut single = Vec::new();
    for op in &invocations {
        let t = Instant::now();
        core.exec_operator(op.name(), &op.params_json(), &[0]).map_err(|e| e.to_string())?;
        single.push((op.name(), t.elapsed()));
    }
    let a_ok = single.iter().all(|(_, t)| *t <= Duration::from_millis(500));

    // (b) join growth versus projection growth, 250 -> 1000 documents
    let attrs = ["A3".to_string()].into();
    let times = |n: usize| {
        let l = keyed(n, n as i64 * 4, 6, "C1", ["A1", "A3", "A5"]);
        let r = keyed(n, n as i64 * 4, 7, "C2", ["A2", "A3", "A4"]);
        let p = Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3"));
        let tj = min_time(3, || {
            join(&l, &r, &p).unwrap();
        });
        let tp = min_time(3, || {
            project(&l, &attrs).unwrap();
        });
        (tj, tp)
    };
    let (j_small, p_small) = times(250);
    let (j_large, p_large) = times(1000);
    let join_growth = j_large.as_secs_f64() / j_small.as_secs_f64();
    let proj_growth = p_large.as_secs_f64() / p_small.as_secs_f64();
    let b_ok = join_growth > 4.0 && join_growth > proj_growth;

    // (c) decrypt cost at 1 B and 100 KB
    let mut pol = qshield_core::policy::Policy::new();
    let dcid = CollectionId::for_name("D");
    pol.apply(&PolicyUpdate::Add { uid: set.users[0].uid(), cids: [dcid].into() }).unwrap();
    let decrypt_time = |len: usize| {
        let ct = TaggedCiphertext { cid: dcid, ct: sharing::encrypt_document(&set.key, &dcid, &vec![7u8; len]).unwrap() };
        min_time(5, || {
            sharing::decrypt(&pol, &set.enclave, &set.users[0], std::slice::from_ref(&ct)).unwrap();
        })
    };
    let (tiny, big) = (decrypt_time(1), decrypt_time(100 * 1024));
    let decrypt_ratio = big.as_secs_f64().max(tiny.as_secs_f64()) / big.as_secs_f64().min(tiny.as_secs_f64());
    let c_ok = decrypt_ratio < 5.0;

    let summary = format!(
        "(a) {} (b) join x{join_growth:.1} vs projection x{proj_growth:.1} for 4x input (c) decrypt 1 B {tiny:.2?} vs 100 KB {big:.2?}, ratio {decrypt_ratio:.2}",
        single.iter().map(|(n, t)| format!("{n} {t:.1?}")).collect::<Vec<_>>().join(", ")
    );
    check(a_ok && b_ok && c_ok, summary.clone(), summary)
}

fn chunking() -> Verdict {
    let key = setup(128, 1).unwrap().key;
    let mut problems = Vec::new();
    for r in [0usize, 1, 6, 7, 1000] {
        let docs: Vec<Document> = (0..r as i64).map(|i| Document::new().with("A", i)).collect();
        let collection = Collection::named("C", docs.clone()).unwrap();
        let cid = collection.cid();
        let sealed: Vec<_> = docs
            .iter()
            .map(|d| sharing::encrypt_document(&key, &cid, &d.to_canonical_json()).unwrap())
            .collect();
        for s in [1usize, 3, 128] {
            let expected: Vec<usize> = (0..r.div_ceil(s)).map(|k| if (k + 1) * s <= r { s } else { r - k * s }).collect();

            let files = chunk(&collection, s).unwrap();
            let sizes: Vec<usize> = files.iter().map(|f| f.docs.len()).collect();
            let joined: Vec<Document> = files.iter().flat_map(|f| f.docs.clone()).collect();
            let indices_ok = files.iter().enumerate().all(|(k, f)| f.file_index == k + 1);
            if sizes != expected || joined != docs || !indices_ok {
                problems.push(format!("in-memory r={r} s={s}"));
            }

            let dir = tempfile::tempdir().unwrap();
            let store = EncryptedStore::open(dir.path()).unwrap().with_chunk_size(s);
            store.create("C", cid, collection.schema().clone()).unwrap();
            for ct in &sealed {
                store.store(&cid, &qshield_core::host::document_id(ct), ct).unwrap();
            }
            let cdir = dir.path().join(cid.to_hex());
            let mut on_disk = Vec::new();
            let mut stored_cts = Vec::new();
            for k in 1..=expected.len() {
                let bytes = std::fs::read(cdir.join(chunk_file_name(k))).unwrap();
                let blobs = decode_blobs(&bytes).unwrap();
                on_disk.push(blobs.len());
                stored_cts.extend(blobs.into_iter().map(|b| b.to_vec()));
            }
            let extra = cdir.join(chunk_file_name(expected.len() + 1)).exists();
            let original: Vec<Vec<u8>> = sealed.iter().map(|c| c.to_bytes()).collect();
            if on_disk != expected || stored_cts != original || extra {
                problems.push(format!("on-disk r={r} s={s}"));
            }
            let reopened = EncryptedStore::open(dir.path()).unwrap();
            if reopened.get(&cid).map(|d| d.len()) != Some(r) {
                problems.push(format!("reload r={r} s={s}"));
            }
        }
    }
    check(
        problems.is_empty(),
        "15 (r, s) pairs: concatenation identity, ceil(r/s) files, sizes s..s,r-s(ceil(r/s)-1) in memory and on disk",
        format!("{problems:?}"),
    )
}

fn policy_lifecycle() -> Verdict {
    let mut w = World::new(2);
    for name in ["C1", "C2", "C3"] {
        let docs: Vec<Document> = (0..3).map(|i| Document::new().with("K", i as i64)).collect();
        w.upload(name, &docs, &[]);
    }
    let catalog = w.catalog();
    let cid = |n: &str| catalog[n].cid;
    let uid = w.user(1).uid();
    let mut user = w.user(1);

    // Collections the core unlocks for the user, and those the owner's
    // policy says it should.
    let read = |w: &World, user: &mut qshield_core::client::UserContext| -> Result<BTreeSet<CollectionId>, String> {
        let (tk, _) = user.read_token().map_err(|e| e.to_string())?;
        let env = w.svc.raw_read(&tk, None).map_err(|e| e.to_string())?;
        let raw = user.open_raw(&env).map_err(|e| e.to_string())?;
        match StatePayload::from_canonical_json(&raw).map_err(|e| e.to_string())? {
            StatePayload::Database(db) => Ok(db.values().map(|c| c.cid()).collect()),
            other => Err(format!("unexpected payload {other:?}")),
        }
    };
    let expected = |w: &World| w.owner.policy().lookup(&uid).map(|e| e.cids.clone());

    let mut steps = Vec::new();
    let mut step = |label: &str, w: &mut World, update: PolicyUpdate, user: &mut qshield_core::client::UserContext| -> Result<(), String> {
        w.owner.update_policy(&w.svc, &update).map_err(|e| format!("{label}: {e}"))?;
        let got = read(w, user);
        let ok = match (expected(w), &got) {
            (Some(cids), Ok(seen)) => &cids == seen,
            (None, Err(e)) => e.contains("not authorized"),
            _ => false,
        };
        steps.push(format!("{label} {}", if ok { "ok" } else { "mismatch" }));
        if ok { Ok(()) } else { Err(format!("{label}: core view {got:?} vs policy {:?}", expected(w))) }
    };

    step("modify", &mut w, PolicyUpdate::Modify { uid, cids: [cid("C1"), cid("C2")].into() }, &mut user)?;
    step("modify", &mut w, PolicyUpdate::Modify { uid, cids: [cid("C3")].into() }, &mut user)?;
    step("remove", &mut w, PolicyUpdate::Remove { uid }, &mut user)?;
    step("add", &mut w, PolicyUpdate::Add { uid, cids: [cid("C2"), cid("C3")].into() }, &mut user)?;

    // Updates the core must refuse leave both copies unchanged.
    let before = w.owner.policy().digest();
    let dup = w.owner.update_policy(&w.svc, &PolicyUpdate::Add { uid, cids: BTreeSet::new() });
    let refused = matches!(dup, Err(ClientError::Policy(_))) && w.owner.policy().digest() == before;
    let still = read(&w, &mut user).map_err(|e| e.to_string())? == expected(&w).unwrap();

    // Uploading a new collection grants it through the same acknowledged path.
    let receipt = w
        .owner
        .upload(&w.svc, UploadTarget::New { name: "C4", authorized: &[uid] }, &[Document::new().with("K", 9i64)])
        .map_err(|e| e.to_string())?;
    let granted = read(&w, &mut user).map_err(|e| e.to_string())?.contains(&receipt.cid);

    check(
        refused && still && granted,
        format!("{}; duplicate add refused; upload grant acknowledged", steps.join(", ")),
        format!("refused={refused} unchanged={still} upload_grant={granted}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 7] = [
        ("1 crypto correctness", crypto_correctness),
        ("2 join-aggregate end to end", join_sum_end_to_end),
        ("3 operator oracles", operator_oracles),
        ("4 threat-model detection", threat_detection),
        ("5 performance properties", performance),
        ("6 chunking round trip", chunking),
        ("7 policy lifecycle", policy_lifecycle),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match verdict {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                println!("FAIL criterion {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

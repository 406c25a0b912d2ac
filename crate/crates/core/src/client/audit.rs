//! Trust-proof audit. The user re-derives the plan for its own query and
//! checks the signed trace against it: signature, trace shape, freshness,
//! budget descent, plan isomorphism, and the result digest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, SigPublicKey};
use crate::enclave::{ResponseEnvelope, TraceRecord};
use crate::query::{compute_endurance, PlanOp, QueryPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Checks run in order; the report stops at the first failing one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub verdict: Verdict,
    pub checks: Vec<CheckResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Name of the first failing check.
    pub fn failure(&self) -> Option<&str> {
        self.checks.iter().find(|c| !c.pass).map(|c| c.name.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.checks.iter().find(|c| !c.pass) {
            None => write!(f, "PASS"),
            Some(c) => write!(f, "FAIL({}): {}", c.name, c.detail),
        }
    }
}

pub const CHECK_NAMES: [&str; 6] = ["signature", "trace", "freshness", "budget", "structure", "digest"];

/// What the user expects of a response to its own request.
#[derive(Debug, Clone, Copy)]
pub struct Expectation<'a> {
    pub plan: &'a QueryPlan,
    /// Counter sealed into the request's token.
    pub counter: u64,
    pub sig_pub: &'a SigPublicKey,
}

/// Audits an envelope given the decrypted result bytes (the canonical
/// payload encoding).
pub fn audit_proof(expect: &Expectation<'_>, env: &ResponseEnvelope, result: &[u8]) -> AuditReport {
    let mut checks = Vec::new();
    let mut run = |name: &str, outcome: Result<String, String>| {
        let pass = outcome.is_ok();
        let detail = outcome.unwrap_or_else(|e| e);
        checks.push(CheckResult { name: name.into(), pass, detail });
        pass
    };
    let ok = run(
        "signature",
        env.verify(expect.sig_pub)
            .map(|_| "trust proof signed by the attested core".into())
            .map_err(|_| "signature does not verify over the trust proof".into()),
    );
    let records = match ok.then(|| env.records()) {
        Some(Ok(r)) => Some(r),
        Some(Err(_)) => {
            run("trace", Err("trust proof is not a record list".into()));
            None
        }
        None => None,
    };
    if let Some(records) = records {
        let _ = run("trace", check_trace(&records))
            && run("freshness", check_freshness(&records, expect.counter))
            && run("budget", check_budget(&records, compute_endurance(expect.plan)))
            && run("structure", check_structure(&records, expect.plan))
            && run("digest", check_digest(&records, result));
    }
    let verdict = if checks.iter().all(|c| c.pass) && checks.len() == CHECK_NAMES.len() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    AuditReport { verdict, checks }
}

fn check_trace(records: &[TraceRecord]) -> Result<String, String> {
    let first = records.first().ok_or("empty trace")?;
    if first.func.f_name != "unlock" || !first.p_states.is_empty() {
        return Err("first state is not the unlock state".into());
    }
    for (i, r) in records.iter().enumerate() {
        if r.s_id != i as u64 {
            return Err(format!("state at position {i} has id {}", r.s_id));
        }
        if i > 0 && (r.p_states.is_empty() || r.p_states.iter().any(|&p| p >= r.s_id)) {
            return Err(format!("state {i} does not derive from earlier states"));
        }
    }
    Ok(format!("{} states", records.len()))
}

fn check_freshness(records: &[TraceRecord], counter: u64) -> Result<String, String> {
    let recorded = records[0].func.f_params.get("counter").and_then(|c| c.as_u64());
    match recorded {
        Some(c) if c == counter => Ok(format!("counter {c}")),
        Some(c) => Err(format!("trace was unlocked with counter {c}, expected {counter}")),
        None => Err("unlock state carries no counter".into()),
    }
}

fn check_budget(records: &[TraceRecord], omega: u64) -> Result<String, String> {
    if records[0].w != omega {
        return Err(format!("initial budget {} differs from the plan's {omega}", records[0].w));
    }
    for pair in records.windows(2) {
        if pair[1].w.checked_add(1) != Some(pair[0].w) {
            return Err(format!("budget goes from {} to {} at state {}", pair[0].w, pair[1].w, pair[1].s_id));
        }
    }
    let last = records.last().expect("nonempty");
    if last.w != 0 {
        return Err(format!("budget ends at {}, not 0", last.w));
    }
    Ok(format!("{omega} operators"))
}

/// Maps the plan's sink to the last state and walks both graphs together.
/// Every operator node must land on a distinct state with the same operator
/// and parameters, sources land on the unlock state, and every state must
/// be reached.
fn check_structure(records: &[TraceRecord], plan: &QueryPlan) -> Result<String, String> {
    let ops = plan.operator_nodes().count();
    if records.len() != ops + 1 {
        return Err(format!("{} operator states for {ops} plan operators", records.len() - 1));
    }
    let mut node_to_state: BTreeMap<usize, u64> = BTreeMap::new();
    let mut state_to_node: BTreeMap<u64, usize> = BTreeMap::new();
    let mut stack = vec![(plan.sink, records.len() as u64 - 1)];
    while let Some((node_id, s_id)) = stack.pop() {
        let node = plan.node(node_id).ok_or("plan references a missing node")?;
        let PlanOp::Operator(op) = &node.op else {
            if s_id != 0 {
                return Err(format!("source {node_id} maps to state {s_id}, not the unlock state"));
            }
            continue;
        };
        if let Some(&prev) = node_to_state.get(&node_id) {
            if prev != s_id {
                return Err(format!("plan node {node_id} maps to both state {prev} and {s_id}"));
            }
            continue;
        }
        if let Some(&other) = state_to_node.get(&s_id) {
            return Err(format!("state {s_id} stands for plan nodes {other} and {node_id}"));
        }
        let r = &records[s_id as usize];
        if s_id == 0 {
            return Err(format!("plan node {node_id} maps to the unlock state"));
        }
        if r.func.f_name != op.name() {
            return Err(format!("state {s_id} ran {}, plan node {node_id} is {}", r.func.f_name, op.name()));
        }
        if r.func.f_params != op.params_json() {
            return Err(format!("state {s_id} ran {} with different parameters", r.func.f_name));
        }
        if r.p_states.len() != node.inputs.len() {
            return Err(format!("state {s_id} has {} inputs, plan node {node_id} has {}", r.p_states.len(), node.inputs.len()));
        }
        node_to_state.insert(node_id, s_id);
        state_to_node.insert(s_id, node_id);
        stack.extend(node.inputs.iter().copied().zip(r.p_states.iter().copied()));
    }
    if node_to_state.len() != ops {
        return Err(format!("{} of {ops} plan operators reach the final state", node_to_state.len()));
    }
    Ok("trace matches the query plan".into())
}

fn check_digest(records: &[TraceRecord], result: &[u8]) -> Result<String, String> {
    let last = records.last().expect("nonempty");
    if last.s_db_digest != sha256(result) {
        return Err(format!("result is not the payload of final state {}", last.s_id));
    }
    Ok(format!("result bound to state {}", last.s_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKey;
    use crate::enclave::{encode_trust_proof, FuncRecord};
    use crate::crypto::{AeadKey, Sealed};
    use crate::ids::CollectionId;
    use crate::query::{parse, plan, Catalog, CatalogEntry};

    fn join_sum_plan() -> QueryPlan {
        let catalog: Catalog = [("C1", ["A1", "A3", "A5"]), ("C2", ["A2", "A3", "A4"])]
            .into_iter()
            .map(|(n, attrs)| {
                let schema = attrs.iter().map(|a| a.to_string()).collect();
                (n.to_string(), CatalogEntry { cid: CollectionId::for_name(n), schema })
            })
            .collect();
        let q = parse("SELECT SUM(A4) FROM C1 JOIN C2 ON C1.A3 = C2.A3 WHERE C1.A1 <= 10").unwrap();
        plan(&q, &catalog).unwrap()
    }

    /// Trace a faithful core would sign for `p`, with `result` as the final
    /// payload.
    fn faithful(p: &QueryPlan, counter: u64, result: &[u8]) -> Vec<TraceRecord> {
        let omega = compute_endurance(p);
        let mut records = vec![TraceRecord {
            s_id: 0,
            p_states: vec![],
            func: FuncRecord { f_name: "unlock".into(), f_params: serde_json::json!({ "counter": counter }), worker: None },
            s_db_digest: [0; 32],
            w: omega,
        }];
        let mut state_of = vec![0u64; p.nodes.len()];
        for node in &p.nodes {
            if let PlanOp::Operator(op) = &node.op {
                let s_id = records.len() as u64;
                records.push(TraceRecord {
                    s_id,
                    p_states: node.inputs.iter().map(|&i| state_of[i]).collect(),
                    func: FuncRecord { f_name: op.name().into(), f_params: op.params_json(), worker: None },
                    s_db_digest: [s_id as u8; 32],
                    w: omega - s_id,
                });
                state_of[node.node_id] = s_id;
            }
        }
        records.last_mut().unwrap().s_db_digest = sha256(result);
        records
    }

    fn sign(records: &[TraceRecord], key: &SigningKey) -> ResponseEnvelope {
        let tp = encode_trust_proof(records);
        let sig = key.sign(tp.as_bytes());
        let result: Sealed = AeadKey::from_bytes([1; 32]).seal(b"x", b"");
        ResponseEnvelope { result, tp, sig }
    }

    fn audit(records: &[TraceRecord], p: &QueryPlan) -> AuditReport {
        let key = SigningKey::generate();
        let env = sign(records, &key);
        let pk = key.public_key();
        audit_proof(&Expectation { plan: p, counter: 7, sig_pub: &pk }, &env, b"result")
    }

    #[test]
    fn faithful_trace_passes() {
        let p = join_sum_plan();
        let r = audit(&faithful(&p, 7, b"result"), &p);
        assert!(r.passed(), "{r}");
        let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, CHECK_NAMES);
        assert!(r.to_json().starts_with(r#"{"verdict":"PASS","checks":[{"name":"signature","pass":true"#));
    }

    #[test]
    fn swapped_operators_fail_structure() {
        let p = join_sum_plan();
        let mut records = faithful(&p, 7, b"result");
        let f1 = records[1].func.clone();
        records[1].func = records[2].func.clone();
        records[2].func = f1;
        assert_eq!(audit(&records, &p).failure(), Some("structure"));
    }

    #[test]
    fn extra_state_fails_budget() {
        let p = join_sum_plan();
        let mut records = faithful(&p, 7, b"result");
        let mut extra = records[1].clone();
        extra.s_id = records.len() as u64;
        extra.p_states = vec![extra.s_id - 1];
        extra.w = 0;
        records.push(extra);
        records.last_mut().unwrap().s_db_digest = sha256(b"result");
        assert_eq!(audit(&records, &p).failure(), Some("budget"));
    }

    #[test]
    fn other_failures_are_named() {
        let p = join_sum_plan();
        let good = faithful(&p, 7, b"result");

        let stale = faithful(&p, 6, b"result");
        assert_eq!(audit(&stale, &p).failure(), Some("freshness"));

        let mut params = good.clone();
        params[1].func.f_params["source"] = serde_json::json!("C2");
        assert_eq!(audit(&params, &p).failure(), Some("structure"));

        let mut digest = good.clone();
        digest.last_mut().unwrap().s_db_digest = [9; 32];
        assert_eq!(audit(&digest, &p).failure(), Some("digest"));

        let mut ids = good.clone();
        ids[2].s_id = 9;
        assert_eq!(audit(&ids, &p).failure(), Some("trace"));

        let key = SigningKey::generate();
        let mut env = sign(&good, &key);
        env.tp.push(' ');
        let pk = key.public_key();
        let r = audit_proof(&Expectation { plan: &p, counter: 7, sig_pub: &pk }, &env, b"result");
        assert_eq!(r.failure(), Some("signature"));
        assert_eq!(r.checks.len(), 1);
    }
}

//! Deviating invocation scripts and their outcomes.

use qshield_core::client::{PendingQuery, UserContext};
use qshield_core::host::{AttackScript, InputRef, Invocation, LocalClient, Mutation, Schedule};
use serde_json::Value as Json;

/// Every single-step deviation of a faithful schedule: label swaps between
/// different operators, parameter substitutions, inserted, rewired and
/// dropped invocations, and finalizing the wrong state.
pub fn mutants(s: &Schedule) -> Vec<(&'static str, AttackScript)> {
    let n = s.invocations.len();
    let one = |m: Mutation| AttackScript { mutations: vec![m] };
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (x, y) = (&s.invocations[a], &s.invocations[b]);
            if (x.f_name.as_str(), &x.f_params) != (y.f_name.as_str(), &y.f_params) {
                out.push(("reorder", one(Mutation::Swap { a, b })));
            }
        }
    }
    for (index, inv) in s.invocations.iter().enumerate() {
        for f_params in json_variants(&inv.f_params) {
            out.push(("substitute", one(Mutation::Substitute { index, f_params })));
        }
    }
    for position in 0..=n {
        for template in &s.invocations {
            let inputs = template
                .inputs
                .iter()
                .map(|r| match r {
                    InputRef::Op(i) if *i >= position => InputRef::Source,
                    other => *other,
                })
                .collect();
            let invocation = Invocation { inputs, ..template.clone() };
            out.push(("insert", one(Mutation::Insert { position, invocation })));
        }
    }
    for (index, inv) in s.invocations.iter().enumerate() {
        let earlier: Vec<InputRef> = std::iter::once(InputRef::Source).chain((0..index).map(InputRef::Op)).collect();
        for slot in 0..inv.inputs.len() {
            for alt in earlier.iter().filter(|r| **r != inv.inputs[slot]) {
                let mut inputs = inv.inputs.clone();
                inputs[slot] = *alt;
                out.push(("rewire", one(Mutation::Rewire { index, inputs })));
            }
        }
    }
    for index in 0..n {
        out.push(("drop", one(Mutation::Drop { index })));
    }
    for index in (0..n).map(Some).chain([None]) {
        if index != s.finalize {
            out.push(("finalize", one(Mutation::FinalizeAt { index })));
        }
    }
    out
}

/// Parameter objects differing from `v` in exactly one leaf: numbers moved
/// up or down by one, strings extended, booleans flipped, arrays shortened.
pub fn json_variants(v: &Json) -> Vec<Json> {
    match v {
        Json::Number(x) => {
            if let Some(i) = x.as_i64() {
                vec![Json::from(i + 1), Json::from(i - 1)]
            } else {
                x.as_f64().map(|f| vec![Json::from(f + 1.0), Json::from(f - 1.0)]).unwrap_or_default()
            }
        }
        Json::String(s) => vec![Json::String(format!("{s}x"))],
        Json::Bool(b) => vec![Json::Bool(!b)],
        Json::Null => vec![Json::String("C1".into())],
        Json::Array(items) => {
            let mut out = Vec::new();
            if !items.is_empty() {
                out.push(Json::Array(items[..items.len() - 1].to_vec()));
            }
            for (i, item) in items.iter().enumerate() {
                for alt in json_variants(item) {
                    let mut next = items.clone();
                    next[i] = alt;
                    out.push(Json::Array(next));
                }
            }
            out
        }
        Json::Object(map) => {
            let mut out = Vec::new();
            for (k, item) in map {
                for alt in json_variants(item) {
                    let mut next = map.clone();
                    next.insert(k.clone(), alt);
                    out.push(Json::Object(next));
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// The core refused an invocation or the finalize.
    Refused(String),
    /// An envelope came back and the audit named a failing check.
    AuditFail(String),
    /// An envelope came back and passed the audit.
    Undetected,
}

/// Runs `script` for `pending` and audits whatever comes back.
pub fn run_mutant(
    svc: &LocalClient,
    user: &UserContext,
    pending: &PendingQuery,
    script: &AttackScript,
) -> Outcome {
    match svc.attack(&pending.request, script) {
        Err(e) => Outcome::Refused(e.to_string()),
        Ok(env) => match user.open_response(pending, &env) {
            Err(e) => Outcome::AuditFail(e.to_string()),
            Ok((_, report)) => match report.failure() {
                Some(check) => Outcome::AuditFail(check.into()),
                None => Outcome::Undetected,
            },
        },
    }
}

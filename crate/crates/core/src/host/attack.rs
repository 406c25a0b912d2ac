//! Invocation scripts. A faithful plan becomes a list of invocations; a
//! script rewrites that list before the host replays it against the core.

use serde::{Deserialize, Serialize};

use super::HostError;
use crate::query::{PlanOp, QueryPlan};

/// Where an invocation reads from: the unlocked database or an earlier
/// invocation's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputRef {
    Source,
    Op(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub f_name: String,
    pub f_params: serde_json::Value,
    pub inputs: Vec<InputRef>,
}

/// One rewrite of the invocation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    /// Exchange the operators (name and parameters) at two positions; the
    /// edges stay where they are.
    Swap { a: usize, b: usize },
    /// Replace the parameters of one invocation.
    Substitute { index: usize, f_params: serde_json::Value },
    /// Insert a new invocation at `position`. Its inputs refer to the list
    /// as it was before the insertion and must precede `position`.
    Insert { position: usize, invocation: Invocation },
    /// Point an invocation at different input states, each of which must
    /// precede it.
    Rewire { index: usize, inputs: Vec<InputRef> },
    /// Remove one invocation; whatever read it reads its first input
    /// instead.
    Drop { index: usize },
    /// Finalize this invocation's state (`None`: the unlocked database)
    /// instead of the last one.
    FinalizeAt { index: Option<usize> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackScript {
    pub mutations: Vec<Mutation>,
}

/// The invocation list a faithful host would issue for `plan`, plus the
/// invocation to finalize.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub invocations: Vec<Invocation>,
    pub finalize: Option<usize>,
}

impl Schedule {
    pub fn from_plan(plan: &QueryPlan) -> Self {
        let mut position = vec![None; plan.nodes.len()];
        let mut invocations = Vec::new();
        for node in &plan.nodes {
            if let PlanOp::Operator(op) = &node.op {
                let inputs = node
                    .inputs
                    .iter()
                    .map(|&i| position[i].map_or(InputRef::Source, InputRef::Op))
                    .collect();
                position[node.node_id] = Some(invocations.len());
                invocations.push(Invocation {
                    f_name: op.name().into(),
                    f_params: op.params_json(),
                    inputs,
                });
            }
        }
        let finalize = position[plan.sink];
        Self { invocations, finalize }
    }

    pub fn apply(&mut self, m: &Mutation) -> Result<(), HostError> {
        let n = self.invocations.len();
        let bad = |msg: String| Err(HostError::Script(msg));
        match m {
            Mutation::Swap { a, b } => {
                if *a >= n || *b >= n {
                    return bad(format!("swap index out of range ({a}, {b})"));
                }
                let (fa, pa) = {
                    let x = &self.invocations[*a];
                    (x.f_name.clone(), x.f_params.clone())
                };
                let (fb, pb) = {
                    let y = &self.invocations[*b];
                    (y.f_name.clone(), y.f_params.clone())
                };
                self.invocations[*a].f_name = fb;
                self.invocations[*a].f_params = pb;
                self.invocations[*b].f_name = fa;
                self.invocations[*b].f_params = pa;
            }
            Mutation::Substitute { index, f_params } => {
                let Some(inv) = self.invocations.get_mut(*index) else {
                    return bad(format!("substitute index {index} out of range"));
                };
                inv.f_params = f_params.clone();
            }
            Mutation::Insert { position, invocation } => {
                if *position > n {
                    return bad(format!("insert position {position} out of range"));
                }
                if invocation.inputs.iter().any(|r| matches!(r, InputRef::Op(i) if i >= position)) {
                    return bad("inserted invocation reads a later one".into());
                }
                for inv in &mut self.invocations {
                    for r in &mut inv.inputs {
                        if let InputRef::Op(i) = r {
                            if *i >= *position {
                                *i += 1;
                            }
                        }
                    }
                }
                if let Some(f) = &mut self.finalize {
                    if *f >= *position {
                        *f += 1;
                    }
                }
                self.invocations.insert(*position, invocation.clone());
            }
            Mutation::Rewire { index, inputs } => {
                if *index >= n {
                    return bad(format!("rewire index {index} out of range"));
                }
                if inputs.iter().any(|r| matches!(r, InputRef::Op(i) if i >= index)) {
                    return bad("rewired invocation reads itself or a later one".into());
                }
                self.invocations[*index].inputs = inputs.clone();
            }
            Mutation::Drop { index } => {
                if *index >= n {
                    return bad(format!("drop index {index} out of range"));
                }
                let removed = self.invocations.remove(*index);
                let replacement = removed.inputs.first().copied().unwrap_or(InputRef::Source);
                let remap = |r: InputRef| match r {
                    InputRef::Op(i) if i == *index => replacement,
                    InputRef::Op(i) if i > *index => InputRef::Op(i - 1),
                    other => other,
                };
                for inv in &mut self.invocations {
                    for r in &mut inv.inputs {
                        *r = remap(*r);
                    }
                }
                self.finalize = match self.finalize.map(|f| remap(InputRef::Op(f))) {
                    Some(InputRef::Op(i)) => Some(i),
                    _ => None,
                };
            }
            Mutation::FinalizeAt { index } => {
                if index.is_some_and(|i| i >= n) {
                    return bad("finalize index out of range".into());
                }
                self.finalize = *index;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{parse, plan, Catalog, CatalogEntry};
    use crate::ids::CollectionId;

    fn join_sum() -> Schedule {
        let catalog: Catalog = [("C1", ["A1", "A3", "A5"]), ("C2", ["A2", "A3", "A4"])]
            .into_iter()
            .map(|(n, attrs)| {
                (
                    n.to_string(),
                    CatalogEntry {
                        cid: CollectionId::for_name(n),
                        schema: attrs.iter().map(|a| a.to_string()).collect(),
                    },
                )
            })
            .collect();
        let q = parse("SELECT SUM(A4) FROM C1 JOIN C2 ON C1.A3 = C2.A3 WHERE C1.A1 <= 10").unwrap();
        Schedule::from_plan(&plan(&q, &catalog).unwrap())
    }

    #[test]
    fn faithful_schedule() {
        let s = join_sum();
        let names: Vec<&str> = s.invocations.iter().map(|i| i.f_name.as_str()).collect();
        assert_eq!(names, ["selection", "projection", "projection", "join", "aggregation"]);
        assert_eq!(s.invocations[1].inputs, [InputRef::Op(0)]);
        assert_eq!(s.invocations[2].inputs, [InputRef::Source]);
        assert_eq!(s.invocations[3].inputs, [InputRef::Op(1), InputRef::Op(2)]);
        assert_eq!(s.finalize, Some(4));
    }

    #[test]
    fn drop_rewires_consumers() {
        let mut s = join_sum();
        s.apply(&Mutation::Drop { index: 0 }).unwrap();
        assert_eq!(s.invocations[0].inputs, [InputRef::Source]);
        assert_eq!(s.invocations[2].inputs, [InputRef::Op(0), InputRef::Op(1)]);
        assert_eq!(s.finalize, Some(3));
    }

    #[test]
    fn insert_shifts_references() {
        let mut s = join_sum();
        let extra = s.invocations[0].clone();
        s.apply(&Mutation::Insert { position: 1, invocation: extra }).unwrap();
        assert_eq!(s.invocations.len(), 6);
        assert_eq!(s.invocations[2].inputs, [InputRef::Op(0)]);
        assert_eq!(s.invocations[4].inputs, [InputRef::Op(2), InputRef::Op(3)]);
        assert_eq!(s.finalize, Some(5));
        assert!(s.apply(&Mutation::Insert { position: 0, invocation: s.invocations[4].clone() }).is_err());
    }

    #[test]
    fn rewire_checks_order() {
        let mut s = join_sum();
        s.apply(&Mutation::Rewire { index: 1, inputs: vec![InputRef::Source] }).unwrap();
        assert_eq!(s.invocations[1].inputs, [InputRef::Source]);
        assert!(s.apply(&Mutation::Rewire { index: 1, inputs: vec![InputRef::Op(1)] }).is_err());
    }

    #[test]
    fn script_json_shape() {
        let script = AttackScript { mutations: vec![Mutation::Swap { a: 0, b: 1 }] };
        assert_eq!(
            serde_json::to_string(&script).unwrap(),
            r#"{"mutations":[{"kind":"swap","a":0,"b":1}]}"#
        );
    }
}

//! Plan compilation. Plans are DAGs whose node ids are assigned in
//! topological order, so `inputs` always point at smaller ids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::parser::{AttrName, Query, SelectList};
use crate::document::{join_output_names, AttrRef, JoinNaming, JoinSide, Predicate};
use crate::ids::CollectionId;
use crate::operator::{Operator, OperatorError, OperatorKind, StatePayload};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("collection {0} is not declared")]
    UnknownCollection(String),
    #[error("attribute {0} is not present in the queried collections")]
    UnknownAttribute(String),
    #[error("attribute {0} is ambiguous; qualify it with a collection name")]
    Ambiguous(String),
    #[error("{0}")]
    Semantic(String),
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// What the planner knows about a stored collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub cid: CollectionId,
    pub schema: BTreeSet<String>,
}

pub type Catalog = BTreeMap<String, CatalogEntry>;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOp {
    Source { collection: String },
    Operator(Operator),
}

impl PlanOp {
    pub fn op_name(&self) -> &'static str {
        match self {
            PlanOp::Source { .. } => "source",
            PlanOp::Operator(op) => op.name(),
        }
    }

    pub fn params_json(&self) -> serde_json::Value {
        match self {
            PlanOp::Source { collection } => serde_json::json!({ "collection": collection }),
            PlanOp::Operator(op) => op.params_json(),
        }
    }

    pub fn operator(&self) -> Option<&Operator> {
        match self {
            PlanOp::Operator(op) => Some(op),
            PlanOp::Source { .. } => None,
        }
    }

    fn arity(&self) -> usize {
        match self {
            PlanOp::Source { .. } => 0,
            PlanOp::Operator(op) => op.kind().arity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub node_id: usize,
    pub op: PlanOp,
    pub inputs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NodeRepr {
    node_id: usize,
    op_name: String,
    params: serde_json::Value,
    inputs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    nodes: Vec<NodeRepr>,
    sink: usize,
}

/// Compiled query plan.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub nodes: Vec<PlanNode>,
    pub sink: usize,
}

impl QueryPlan {
    pub fn node(&self, id: usize) -> Option<&PlanNode> {
        self.nodes.get(id).filter(|n| n.node_id == id)
    }

    /// Non-source nodes in execution order.
    pub fn operator_nodes(&self) -> impl Iterator<Item = (&PlanNode, &Operator)> {
        self.nodes.iter().filter_map(|n| n.op.operator().map(|op| (n, op)))
    }

    /// Checks ids, arities, acyclicity, single sink, and reachability.
    pub fn validate(&self) -> Result<(), PlanError> {
        let invalid = |m: String| Err(PlanError::Invalid(m));
        if self.nodes.is_empty() {
            return invalid("plan has no nodes".into());
        }
        let mut consumed = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_id != i {
                return invalid(format!("node at position {i} has id {}", n.node_id));
            }
            if n.inputs.len() != n.op.arity() {
                return invalid(format!(
                    "node {i} ({}) has {} inputs",
                    n.op.op_name(),
                    n.inputs.len()
                ));
            }
            for &p in &n.inputs {
                if p >= i {
                    return invalid(format!("node {i} reads node {p}, which does not precede it"));
                }
                consumed.insert(p);
            }
        }
        let sinks: Vec<usize> = (0..self.nodes.len()).filter(|i| !consumed.contains(i)).collect();
        if sinks != [self.sink] {
            return invalid(format!("expected single sink {}, found {sinks:?}", self.sink));
        }
        Ok(())
    }

    /// Canonical JSON: nodes by id, fields in the order node_id, op_name,
    /// params, inputs.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let repr = PlanRepr {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRepr {
                    node_id: n.node_id,
                    op_name: n.op.op_name().to_owned(),
                    params: n.op.params_json(),
                    inputs: n.inputs.clone(),
                })
                .collect(),
            sink: self.sink,
        };
        serde_json::to_vec(&repr).expect("plans serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, PlanError> {
        let repr: PlanRepr =
            serde_json::from_slice(bytes).map_err(|e| PlanError::Invalid(e.to_string()))?;
        let nodes = repr
            .nodes
            .into_iter()
            .map(|n| {
                let op = if n.op_name == "source" {
                    let collection = n
                        .params
                        .get("collection")
                        .and_then(|c| c.as_str())
                        .ok_or_else(|| PlanError::Invalid("source without collection".into()))?;
                    PlanOp::Source { collection: collection.to_owned() }
                } else {
                    PlanOp::Operator(Operator::from_parts(&n.op_name, n.params)?)
                };
                Ok(PlanNode { node_id: n.node_id, op, inputs: n.inputs })
            })
            .collect::<Result<Vec<_>, PlanError>>()?;
        let plan = QueryPlan { nodes, sink: repr.sink };
        plan.validate()?;
        Ok(plan)
    }
}

/// Number of trusted-core operator invocations the plan needs.
pub fn compute_endurance(plan: &QueryPlan) -> u64 {
    plan.operator_nodes().count() as u64
}

struct Builder {
    nodes: Vec<PlanNode>,
}

impl Builder {
    fn push(&mut self, op: PlanOp, inputs: Vec<usize>) -> usize {
        let node_id = self.nodes.len();
        self.nodes.push(PlanNode { node_id, op, inputs });
        node_id
    }
}

/// Resolved attribute: index into the query's collection list plus name.
type Resolved = (usize, String);

fn resolve(
    attr: &AttrName,
    sources: &[(&str, &CatalogEntry)],
    join_keys: Option<(&str, &str)>,
) -> Result<Resolved, PlanError> {
    match &attr.collection {
        Some(c) => {
            let idx = sources.iter().position(|(n, _)| n == c).ok_or_else(|| {
                PlanError::Semantic(format!(
                    "{c}.{} refers to collection {c}, which the query does not read",
                    attr.name
                ))
            })?;
            if !sources[idx].1.schema.contains(&attr.name) {
                return Err(PlanError::UnknownAttribute(format!("{c}.{}", attr.name)));
            }
            Ok((idx, attr.name.clone()))
        }
        None => {
            let hits: Vec<usize> = (0..sources.len())
                .filter(|&i| sources[i].1.schema.contains(&attr.name))
                .collect();
            match hits.as_slice() {
                [] => Err(PlanError::UnknownAttribute(attr.name.clone())),
                [i] => Ok((*i, attr.name.clone())),
                _ if join_keys == Some((attr.name.as_str(), attr.name.as_str())) => {
                    Ok((0, attr.name.clone()))
                }
                _ => Err(PlanError::Ambiguous(attr.name.clone())),
            }
        }
    }
}

/// Compiles a parsed query into a plan over the collections in `catalog`.
///
/// Selections sit directly on their source, every source is then projected
/// onto the attributes needed downstream, the join (if any) reads the two
/// projections, and an aggregation becomes the sink. A final projection is
/// added after a join when the join output carries more than was selected.
pub fn plan(query: &Query, catalog: &Catalog) -> Result<QueryPlan, PlanError> {
    let lookup = |name: &str| {
        catalog.get(name).ok_or_else(|| PlanError::UnknownCollection(name.to_owned()))
    };
    let mut sources: Vec<(&str, &CatalogEntry)> = vec![(&query.from, lookup(&query.from)?)];
    if let Some(j) = &query.join {
        if j.collection == query.from {
            return Err(PlanError::Semantic(format!("self-join of {} is not supported", j.collection)));
        }
        sources.push((&j.collection, lookup(&j.collection)?));
    }

    // Join keys, oriented so the first one belongs to the FROM collection.
    let join_keys: Option<(String, String)> = match &query.join {
        None => None,
        Some(j) => {
            let l = resolve(&j.left, &sources, None)?;
            let r = resolve(&j.right, &sources, None)?;
            match (l, r) {
                ((0, a), (1, b)) | ((1, b), (0, a)) => Some((a, b)),
                _ => {
                    return Err(PlanError::Semantic(
                        "join condition must compare one attribute of each collection".into(),
                    ))
                }
            }
        }
    };
    let keys_ref = join_keys.as_ref().map(|(a, b)| (a.as_str(), b.as_str()));

    let filter = match &query.filter {
        Some(w) => Some((resolve(&w.attr, &sources, keys_ref)?, w)),
        None => None,
    };
    let (outputs, aggregate): (Vec<Resolved>, _) = match &query.select {
        SelectList::Attributes(attrs) => (
            attrs.iter().map(|a| resolve(a, &sources, keys_ref)).collect::<Result<_, _>>()?,
            None,
        ),
        SelectList::Aggregate { function, attr } => {
            let r = resolve(attr, &sources, keys_ref)?;
            (vec![r.clone()], Some((*function, r)))
        }
    };

    let mut needed: Vec<BTreeSet<String>> = vec![BTreeSet::new(); sources.len()];
    for (i, a) in &outputs {
        needed[*i].insert(a.clone());
    }
    if let Some((a, b)) = &join_keys {
        needed[0].insert(a.clone());
        needed[1].insert(b.clone());
    }

    let mut b = Builder { nodes: Vec::new() };
    let source_ids: Vec<usize> = sources
        .iter()
        .map(|(name, _)| b.push(PlanOp::Source { collection: (*name).to_owned() }, vec![]))
        .collect();

    let mut heads = Vec::new();
    for (i, (name, _)) in sources.iter().enumerate() {
        let mut head = source_ids[i];
        if let Some(((fi, attr), w)) = &filter {
            if *fi == i {
                let predicate = Predicate::literal(AttrRef::new(*name, attr), w.op, w.value.clone());
                let op = Operator::Selection { source: Some((*name).to_owned()), predicate };
                head = b.push(PlanOp::Operator(op), vec![head]);
            }
        }
        let op = Operator::Projection {
            source: Some((*name).to_owned()),
            attributes: needed[i].clone(),
        };
        head = b.push(PlanOp::Operator(op), vec![head]);
        heads.push(head);
    }

    let mut head = heads[0];
    // Output attribute names at `head`, keyed by resolved attribute.
    let mut naming: Option<JoinNaming> = None;
    if let Some((lk, rk)) = &join_keys {
        let (ln, le) = sources[0];
        let (rn, re) = sources[1];
        let predicate = Predicate::join_eq(AttrRef::new(ln, lk), AttrRef::new(rn, rk));
        head = b.push(PlanOp::Operator(Operator::Join { predicate }), vec![heads[0], heads[1]]);
        let n = join_output_names((&le.cid, &needed[0]), (&re.cid, &needed[1]), lk, rk)
            .map_err(|e| PlanError::Semantic(e.to_string()))?;
        naming = Some(n);
    }
    let out_name = |(i, a): &Resolved| -> String {
        match &naming {
            None => a.clone(),
            Some(n) => {
                let side = if *i == 0 { JoinSide::Left } else { JoinSide::Right };
                n.output_name(side, a).expect("needed attributes are join columns").to_owned()
            }
        }
    };

    match aggregate {
        Some((function, attr)) => {
            let op = Operator::Aggregation {
                source: None,
                function,
                attribute: out_name(&attr),
            };
            head = b.push(PlanOp::Operator(op), vec![head]);
        }
        None => {
            if let Some(n) = &naming {
                let wanted: BTreeSet<String> = outputs.iter().map(out_name).collect();
                if wanted != n.output_schema() {
                    let op = Operator::Projection { source: None, attributes: wanted };
                    head = b.push(PlanOp::Operator(op), vec![head]);
                }
            }
        }
    }

    let plan = QueryPlan { nodes: b.nodes, sink: head };
    plan.validate()?;
    Ok(plan)
}

/// Runs `plan` bottom-up over plaintext collections. `database` must be a
/// [`StatePayload::Database`]; every source node reads it.
pub fn evaluate_plan(plan: &QueryPlan, database: &StatePayload) -> Result<StatePayload, PlanError> {
    plan.validate()?;
    let StatePayload::Database(db) = database else {
        return Err(PlanError::Invalid("plans evaluate over a database payload".into()));
    };
    let mut results: Vec<Option<StatePayload>> = Vec::with_capacity(plan.nodes.len());
    for node in &plan.nodes {
        let out = match &node.op {
            PlanOp::Source { collection } => {
                if !db.contains_key(collection) {
                    return Err(PlanError::UnknownCollection(collection.clone()));
                }
                None
            }
            PlanOp::Operator(op) => {
                let inputs: Vec<&StatePayload> = node
                    .inputs
                    .iter()
                    .map(|&i| results[i].as_ref().unwrap_or(database))
                    .collect();
                Some(op.apply(&inputs)?)
            }
        };
        results.push(out);
    }
    Ok(results.swap_remove(plan.sink).unwrap_or_else(|| database.clone()))
}

/// Operator kinds of a plan in node order; handy for assertions.
pub fn operator_kinds(plan: &QueryPlan) -> Vec<OperatorKind> {
    plan.operator_nodes().map(|(_, op)| op.kind()).collect()
}

//! Operator invocations and the payloads they consume and produce. Shared by
//! the trusted core, distributed workers, and the plaintext plan evaluator.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, Digest256};
use crate::document::{
    self, AggregateFn, Collection, CollectionFile, DocumentError, Operand, Predicate, Value,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OperatorError {
    #[error("{op} takes {expected} input(s), got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("bad operator input: {0}")]
    Input(String),
    #[error(transparent)]
    Document(#[from] DocumentError),
}

/// Payload of a query state: the unlocked collections, an intermediate
/// collection, or a final scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePayload {
    Database(BTreeMap<String, Collection>),
    Collection(Collection),
    Scalar(Value),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum PayloadRepr {
    Database { collections: Vec<CollectionFile> },
    Collection { collection: CollectionFile },
    Scalar { value: Value },
}

impl StatePayload {
    pub fn database(collections: impl IntoIterator<Item = Collection>) -> Self {
        StatePayload::Database(collections.into_iter().map(|c| (c.name().to_owned(), c)).collect())
    }

    /// Canonical encoding: compact JSON, collections ordered by name.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let repr = match self {
            StatePayload::Database(map) => {
                PayloadRepr::Database { collections: map.values().map(Collection::to_file).collect() }
            }
            StatePayload::Collection(c) => PayloadRepr::Collection { collection: c.to_file() },
            StatePayload::Scalar(v) => PayloadRepr::Scalar { value: v.clone() },
        };
        serde_json::to_vec(&repr).expect("payloads serialize")
    }

    pub fn from_canonical_json(bytes: &[u8]) -> Result<Self, DocumentError> {
        let repr: PayloadRepr =
            serde_json::from_slice(bytes).map_err(|e| DocumentError::Encoding(e.to_string()))?;
        Ok(match repr {
            PayloadRepr::Database { collections } => StatePayload::database(
                collections.into_iter().map(Collection::from_file).collect::<Result<Vec<_>, _>>()?,
            ),
            PayloadRepr::Collection { collection } => {
                StatePayload::Collection(Collection::from_file(collection)?)
            }
            PayloadRepr::Scalar { value } => StatePayload::Scalar(value),
        })
    }

    pub fn digest(&self) -> Digest256 {
        sha256(&self.to_canonical_json())
    }

    pub fn as_scalar(&self) -> Option<&Value> {
        match self {
            StatePayload::Scalar(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_collection(&self) -> Option<&Collection> {
        match self {
            StatePayload::Collection(c) => Some(c),
            _ => None,
        }
    }
}

/// One relational operator together with its parameters. `source` names the
/// collection to read when the input is the unlocked database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "f_name", content = "f_params", rename_all = "lowercase")]
pub enum Operator {
    Projection {
        source: Option<String>,
        attributes: BTreeSet<String>,
    },
    Selection {
        source: Option<String>,
        predicate: Predicate,
    },
    Aggregation {
        source: Option<String>,
        function: AggregateFn,
        attribute: String,
    },
    Join {
        predicate: Predicate,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Projection,
    Selection,
    Aggregation,
    Join,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Projection => "projection",
            OperatorKind::Selection => "selection",
            OperatorKind::Aggregation => "aggregation",
            OperatorKind::Join => "join",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OperatorKind::Join => 2,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "projection" => Some(OperatorKind::Projection),
            "selection" => Some(OperatorKind::Selection),
            "aggregation" => Some(OperatorKind::Aggregation),
            "join" => Some(OperatorKind::Join),
            _ => None,
        }
    }
}

impl Operator {
    pub fn kind(&self) -> OperatorKind {
        match self {
            Operator::Projection { .. } => OperatorKind::Projection,
            Operator::Selection { .. } => OperatorKind::Selection,
            Operator::Aggregation { .. } => OperatorKind::Aggregation,
            Operator::Join { .. } => OperatorKind::Join,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// `f_params` as a JSON value, the form recorded in execution traces.
    pub fn params_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("operators serialize");
        v.get_mut("f_params").map(serde_json::Value::take).unwrap_or(serde_json::Value::Null)
    }

    pub fn from_parts(f_name: &str, f_params: serde_json::Value) -> Result<Self, OperatorError> {
        serde_json::from_value(serde_json::json!({ "f_name": f_name, "f_params": f_params }))
            .map_err(|e| OperatorError::Input(format!("bad operator parameters: {e}")))
    }

    pub fn apply(&self, inputs: &[&StatePayload]) -> Result<StatePayload, OperatorError> {
        let expected = self.kind().arity();
        if inputs.len() != expected {
            return Err(OperatorError::Arity { op: self.name(), expected, got: inputs.len() });
        }
        Ok(match self {
            Operator::Projection { source, attributes } => StatePayload::Collection(
                document::project(input_collection(inputs[0], source.as_deref())?, attributes)?,
            ),
            Operator::Selection { source, predicate } => StatePayload::Collection(
                document::select(input_collection(inputs[0], source.as_deref())?, predicate)?,
            ),
            Operator::Aggregation { source, function, attribute } => {
                StatePayload::Scalar(document::aggregate(
                    input_collection(inputs[0], source.as_deref())?,
                    *function,
                    attribute,
                )?)
            }
            Operator::Join { predicate } => {
                let Operand::Attribute(rhs) = &predicate.rhs else {
                    return Err(DocumentError::Predicate(
                        "join needs an attribute right-hand side".into(),
                    )
                    .into());
                };
                let left = join_input(inputs[0], &predicate.lhs.collection)?;
                let right = join_input(inputs[1], &rhs.collection)?;
                StatePayload::Collection(document::join(left, right, predicate)?)
            }
        })
    }
}

fn input_collection<'a>(
    payload: &'a StatePayload,
    source: Option<&str>,
) -> Result<&'a Collection, OperatorError> {
    match (payload, source) {
        (StatePayload::Database(map), Some(name)) => map
            .get(name)
            .ok_or_else(|| OperatorError::Input(format!("collection {name} is not unlocked"))),
        (StatePayload::Database(_), None) => {
            Err(OperatorError::Input("reading the unlocked database needs a source".into()))
        }
        (StatePayload::Collection(c), None) => Ok(c),
        (StatePayload::Collection(c), Some(name)) if c.name() == name => Ok(c),
        (StatePayload::Collection(c), Some(name)) => Err(OperatorError::Input(format!(
            "expected collection {name}, input holds {}",
            c.name()
        ))),
        (StatePayload::Scalar(_), _) => {
            Err(OperatorError::Input("operator input is a scalar".into()))
        }
    }
}

fn join_input<'a>(payload: &'a StatePayload, name: &str) -> Result<&'a Collection, OperatorError> {
    match payload {
        StatePayload::Database(_) => input_collection(payload, Some(name)),
        _ => input_collection(payload, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{AttrRef, CmpOp, Document};

    fn db() -> StatePayload {
        let c1 = Collection::named(
            "C1",
            (0..4i64).map(|i| Document::new().with("A1", i).with("A3", i)).collect(),
        )
        .unwrap();
        let c2 = Collection::named(
            "C2",
            (0..4i64).map(|i| Document::new().with("A3", i).with("A4", 10 * i)).collect(),
        )
        .unwrap();
        StatePayload::database([c1, c2])
    }

    #[test]
    fn serializes_with_name_and_params() {
        let op = Operator::Projection { source: Some("C1".into()), attributes: ["A3".to_string()].into() };
        assert_eq!(
            serde_json::to_string(&op).unwrap(),
            r#"{"f_name":"projection","f_params":{"source":"C1","attributes":["A3"]}}"#
        );
        assert_eq!(Operator::from_parts("projection", op.params_json()).unwrap(), op);
    }

    #[test]
    fn apply_reads_sources_from_the_database() {
        let sel = Operator::Selection {
            source: Some("C1".into()),
            predicate: Predicate::literal(AttrRef::new("C1", "A1"), CmpOp::Lt, 2i64),
        };
        let out = sel.apply(&[&db()]).unwrap();
        assert_eq!(out.as_collection().unwrap().len(), 2);

        let join = Operator::Join {
            predicate: Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3")),
        };
        let joined = join.apply(&[&out, &db()]).unwrap();
        assert_eq!(joined.as_collection().unwrap().len(), 2);

        let agg = Operator::Aggregation {
            source: None,
            function: AggregateFn::Sum,
            attribute: "A4".into(),
        };
        assert_eq!(agg.apply(&[&joined]).unwrap(), StatePayload::Scalar(Value::Int(10)));
    }

    #[test]
    fn arity_and_input_errors() {
        let join = Operator::Join {
            predicate: Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3")),
        };
        assert!(matches!(join.apply(&[&db()]), Err(OperatorError::Arity { expected: 2, got: 1, .. })));
        let proj = Operator::Projection { source: None, attributes: BTreeSet::new() };
        assert!(matches!(proj.apply(&[&db()]), Err(OperatorError::Input(_))));
        let scalar = StatePayload::Scalar(Value::Int(1));
        assert!(matches!(proj.apply(&[&scalar]), Err(OperatorError::Input(_))));
    }

    #[test]
    fn payload_encoding_round_trips() {
        let p = db();
        assert_eq!(StatePayload::from_canonical_json(&p.to_canonical_json()).unwrap(), p);
        let s = StatePayload::Scalar(Value::Float(2.5));
        assert_eq!(s.to_canonical_json(), br#"{"kind":"scalar","value":2.5}"#);
    }
}

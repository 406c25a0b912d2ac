//! Document-oriented data model: scalar-valued documents grouped into
//! collections, chunked into files for storage, and the four relational
//! operators that run over them.

mod chunk;
mod ops;
mod value;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use chunk::{chunk, chunk_items, DataFile};
pub use ops::{
    aggregate, join, join_output_names, joined_cid, project, select, AggregateFn, AttrRef, CmpOp,
    JoinNaming, JoinSide, Operand, Predicate,
};
pub use value::{Value, ValueKind};

use crate::crypto::{sha256, Digest256};
use crate::ids::CollectionId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DocumentError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("predicate error: {0}")]
    Predicate(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("aggregate over empty input")]
    EmptyAggregate,
    #[error("integer overflow in aggregate")]
    Overflow,
    #[error("malformed document encoding: {0}")]
    Encoding(String),
}

/// A document: attribute name to scalar value. Names are unique and kept in
/// lexicographic order, which is also the canonical JSON key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Document(BTreeMap<String, Value>);

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) -> Option<Value> {
        self.0.insert(name.into(), value.into())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<(), DocumentError> {
        for (name, value) in &self.0 {
            if name.is_empty() {
                return Err(DocumentError::Schema("empty attribute name".into()));
            }
            if let Value::Float(f) = value {
                if !f.is_finite() {
                    return Err(DocumentError::Type(format!("non-finite float in {name}")));
                }
            }
        }
        Ok(())
    }

    /// Compact JSON with sorted keys.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("documents serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DocumentError> {
        let doc: Document =
            serde_json::from_slice(bytes).map_err(|e| DocumentError::Encoding(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }


    pub(crate) fn from_map(map: BTreeMap<String, Value>) -> Self {
        Self(map)
    }
}

impl FromIterator<(String, Value)> for Document {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Header written ahead of a collection's documents in a collection file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionHeader {
    pub cid: CollectionId,
    pub name: String,
    pub schema: BTreeSet<String>,
    pub count: usize,
}

/// A named group of documents sharing one attribute-name set.
#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    name: String,
    cid: CollectionId,
    schema: BTreeSet<String>,
    docs: Vec<Document>,
}

impl Collection {
    /// Builds a collection with an explicit schema, checking every document
    /// against it and checking per-attribute type stability.
    pub fn new(
        name: impl Into<String>,
        cid: CollectionId,
        schema: BTreeSet<String>,
        docs: Vec<Document>,
    ) -> Result<Self, DocumentError> {
        if schema.iter().any(String::is_empty) {
            return Err(DocumentError::Schema("empty attribute name".into()));
        }
        let mut kinds: BTreeMap<&str, ValueKind> = BTreeMap::new();
        for (i, doc) in docs.iter().enumerate() {
            doc.validate()?;
            if doc.len() != schema.len() || !doc.names().all(|n| schema.contains(n)) {
                return Err(DocumentError::Schema(format!(
                    "document {i} does not match the collection schema"
                )));
            }
            for (name, value) in doc.iter() {
                let Some(kind) = value.kind() else { continue };
                match kinds.get(name.as_str()) {
                    Some(existing) if *existing != kind => {
                        return Err(DocumentError::Type(format!(
                            "attribute {name} mixes {existing:?} and {kind:?} values"
                        )));
                    }
                    Some(_) => {}
                    None => {
                        kinds.insert(name.as_str(), kind);
                    }
                }
            }
        }
        Ok(Self { name: name.into(), cid, schema, docs })
    }

    /// Collection whose id is derived from its name; the schema is taken from
    /// the first document (empty when there are none).
    pub fn named(name: &str, docs: Vec<Document>) -> Result<Self, DocumentError> {
        let schema = docs.first().map(|d| d.names().cloned().collect()).unwrap_or_default();
        Self::new(name, CollectionId::for_name(name), schema, docs)
    }

    pub(crate) fn from_parts_unchecked(
        name: String,
        cid: CollectionId,
        schema: BTreeSet<String>,
        docs: Vec<Document>,
    ) -> Self {
        Self { name, cid, schema, docs }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cid(&self) -> CollectionId {
        self.cid
    }

    pub fn schema(&self) -> &BTreeSet<String> {
        &self.schema
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn header(&self) -> CollectionHeader {
        CollectionHeader {
            cid: self.cid,
            name: self.name.clone(),
            schema: self.schema.clone(),
            count: self.docs.len(),
        }
    }

    pub fn to_file(&self) -> CollectionFile {
        CollectionFile { header: self.header(), documents: self.docs.clone() }
    }

    pub fn from_file(file: CollectionFile) -> Result<Self, DocumentError> {
        if file.header.count != file.documents.len() {
            return Err(DocumentError::Encoding("header count does not match documents".into()));
        }
        Self::new(file.header.name, file.header.cid, file.header.schema, file.documents)
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_file()).expect("collections serialize")
    }

    pub fn digest(&self) -> Digest256 {
        sha256(&self.to_canonical_json())
    }
}

/// On-disk / canonical form of a plaintext collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionFile {
    pub header: CollectionHeader,
    pub documents: Vec<Document>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys() {
        let doc = Document::new().with("b", 2i64).with("a", "x").with("c", 1.5);
        assert_eq!(doc.to_canonical_json(), br#"{"a":"x","b":2,"c":1.5}"#);
        assert_eq!(Document::from_json(&doc.to_canonical_json()).unwrap(), doc);
    }

    #[test]
    fn nested_values_are_rejected() {
        assert!(Document::from_json(br#"{"a":[1,2]}"#).is_err());
        assert!(Document::from_json(br#"{"a":{"b":1}}"#).is_err());
    }

    #[test]
    fn schema_and_type_checks() {
        let ok = Collection::named(
            "C",
            vec![Document::new().with("a", 1i64), Document::new().with("a", Value::Null)],
        );
        assert!(ok.is_ok());
        let missing = Collection::named(
            "C",
            vec![Document::new().with("a", 1i64), Document::new().with("b", 1i64)],
        );
        assert!(matches!(missing, Err(DocumentError::Schema(_))));
        let mixed = Collection::named(
            "C",
            vec![Document::new().with("a", 1i64), Document::new().with("a", "x")],
        );
        assert!(matches!(mixed, Err(DocumentError::Type(_))));
    }

    #[test]
    fn collection_file_round_trip() {
        let c = Collection::named("C1", vec![Document::new().with("A1", 3i64)]).unwrap();
        let json = serde_json::to_string(&c.to_file()).unwrap();
        let back: CollectionFile = serde_json::from_str(&json).unwrap();
        assert_eq!(Collection::from_file(back).unwrap(), c);
    }
}

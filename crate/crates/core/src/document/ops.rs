//! Projection, selection, aggregation and nested-loop join over plaintext
//! collections. All operators are pure.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Collection, Document, DocumentError, Value};
use crate::crypto::sha256_parts;
use crate::ids::CollectionId;

/// `collection.attribute`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttrRef {
    pub collection: String,
    pub attribute: String,
}

impl AttrRef {
    pub fn new(collection: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self { collection: collection.into(), attribute: attribute.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }

    /// Applies the comparison. Ordering operators accept numbers only.
    pub fn apply(self, lhs: &Value, rhs: &Value) -> Result<bool, DocumentError> {
        match self {
            CmpOp::Eq => Ok(lhs.scalar_eq(rhs)),
            CmpOp::Ne => Ok(!lhs.scalar_eq(rhs)),
            _ => {
                // Values stay out of the message: they may be protected data.
                let ord = lhs.numeric_cmp(rhs).ok_or_else(|| {
                    DocumentError::Predicate(format!(
                        "ordering comparison {} needs numeric operands",
                        self.symbol()
                    ))
                })?;
                Ok(match self {
                    CmpOp::Lt => ord == Ordering::Less,
                    CmpOp::Le => ord != Ordering::Greater,
                    CmpOp::Gt => ord == Ordering::Greater,
                    CmpOp::Ge => ord != Ordering::Less,
                    CmpOp::Eq | CmpOp::Ne => unreachable!(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operand {
    Literal(Value),
    Attribute(AttrRef),
}

/// A single binary comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub lhs: AttrRef,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl Predicate {
    pub fn literal(lhs: AttrRef, op: CmpOp, value: impl Into<Value>) -> Self {
        Self { lhs, op, rhs: Operand::Literal(value.into()) }
    }

    pub fn join_eq(lhs: AttrRef, rhs: AttrRef) -> Self {
        Self { lhs, op: CmpOp::Eq, rhs: Operand::Attribute(rhs) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateFn {
    Sum,
    Avg,
    Count,
    Min,
    Max,
}

impl AggregateFn {
    pub fn keyword(self) -> &'static str {
        match self {
            AggregateFn::Sum => "SUM",
            AggregateFn::Avg => "AVG",
            AggregateFn::Count => "COUNT",
            AggregateFn::Min => "MIN",
            AggregateFn::Max => "MAX",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        match word.to_ascii_uppercase().as_str() {
            "SUM" => Some(AggregateFn::Sum),
            "AVG" => Some(AggregateFn::Avg),
            "COUNT" => Some(AggregateFn::Count),
            "MIN" => Some(AggregateFn::Min),
            "MAX" => Some(AggregateFn::Max),
            _ => None,
        }
    }
}

fn require_attr(c: &Collection, attr: &str) -> Result<(), DocumentError> {
    if c.schema().contains(attr) {
        Ok(())
    } else {
        Err(DocumentError::Schema(format!("attribute {attr} not in collection {}", c.name())))
    }
}

/// Keeps only `attrs` in every document.
pub fn project(c: &Collection, attrs: &BTreeSet<String>) -> Result<Collection, DocumentError> {
    for a in attrs {
        require_attr(c, a)?;
    }
    let docs = c
        .docs()
        .iter()
        .map(|d| d.iter().filter(|(n, _)| attrs.contains(*n)).map(|(n, v)| (n.clone(), v.clone())).collect())
        .collect();
    Ok(Collection::from_parts_unchecked(c.name().to_owned(), c.cid(), attrs.clone(), docs))
}

/// Keeps the documents satisfying a literal comparison, in order.
pub fn select(c: &Collection, p: &Predicate) -> Result<Collection, DocumentError> {
    let Operand::Literal(literal) = &p.rhs else {
        return Err(DocumentError::Predicate("selection needs a literal right-hand side".into()));
    };
    require_attr(c, &p.lhs.attribute)?;
    if p.op.is_ordering() && !literal.is_numeric() {
        return Err(DocumentError::Predicate(format!(
            "ordering comparison against non-numeric literal {literal}"
        )));
    }
    let mut docs = Vec::new();
    for d in c.docs() {
        let value = d.get(&p.lhs.attribute).expect("schema checked");
        if p.op.apply(value, literal)? {
            docs.push(d.clone());
        }
    }
    Ok(Collection::from_parts_unchecked(c.name().to_owned(), c.cid(), c.schema().clone(), docs))
}

/// Folds one attribute. Integer sums are exact (overflow is an error);
/// floats are accumulated in document order.
pub fn aggregate(c: &Collection, f: AggregateFn, attr: &str) -> Result<Value, DocumentError> {
    require_attr(c, attr)?;
    if f == AggregateFn::Count {
        return Ok(Value::Int(c.len() as i64));
    }
    if c.is_empty() {
        return Err(DocumentError::EmptyAggregate);
    }
    let values: Vec<&Value> = c.docs().iter().map(|d| d.get(attr).expect("schema checked")).collect();
    if values.iter().all(|v| matches!(v, Value::Int(_))) {
        let ints = values.iter().map(|v| match v {
            Value::Int(i) => *i,
            _ => unreachable!(),
        });
        return Ok(match f {
            AggregateFn::Sum => {
                let total: i128 = ints.map(i128::from).sum();
                Value::Int(i64::try_from(total).map_err(|_| DocumentError::Overflow)?)
            }
            AggregateFn::Avg => {
                let total: i128 = ints.map(i128::from).sum();
                Value::Float(total as f64 / c.len() as f64)
            }
            AggregateFn::Min => Value::Int(ints.min().expect("nonempty")),
            AggregateFn::Max => Value::Int(ints.max().expect("nonempty")),
            AggregateFn::Count => unreachable!(),
        });
    }
    let mut floats = Vec::with_capacity(values.len());
    for v in values {
        match v {
            Value::Float(x) => floats.push(*x),
            Value::Int(i) => floats.push(*i as f64),
            _ => {
                return Err(DocumentError::Type(format!(
                    "{} over non-numeric attribute {attr}",
                    f.keyword()
                )))
            }
        }
    }
    let fold = |init: f64, pick: fn(f64, f64) -> f64| floats.iter().copied().fold(init, pick);
    Ok(Value::Float(match f {
        AggregateFn::Sum => fold(0.0, |a, b| a + b),
        AggregateFn::Avg => fold(0.0, |a, b| a + b) / floats.len() as f64,
        AggregateFn::Min => fold(f64::INFINITY, f64::min),
        AggregateFn::Max => fold(f64::NEG_INFINITY, f64::max),
        AggregateFn::Count => unreachable!(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinSide {
    Left,
    Right,
}

/// How input attributes map onto the merged schema of a join.
///
/// The left join attribute keeps its name and the right one is dropped.
/// Any other name present on both sides is prefixed with `c<cid-short>_` of
/// the collection it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinNaming {
    columns: Vec<(JoinSide, String, String)>,
    left_key: String,
    right_key: String,
}

impl JoinNaming {
    /// Output name of `attr` from `side`. The right join attribute resolves
    /// to the left one.
    pub fn output_name(&self, side: JoinSide, attr: &str) -> Option<&str> {
        if side == JoinSide::Right && attr == self.right_key {
            return self.output_name(JoinSide::Left, &self.left_key.clone());
        }
        self.columns
            .iter()
            .find(|(s, src, _)| *s == side && src == attr)
            .map(|(_, _, out)| out.as_str())
    }

    pub fn output_schema(&self) -> BTreeSet<String> {
        self.columns.iter().map(|(_, _, out)| out.clone()).collect()
    }

    pub fn columns(&self) -> &[(JoinSide, String, String)] {
        &self.columns
    }
}

fn prefixed(cid: &CollectionId, attr: &str) -> String {
    format!("c{}_{attr}", cid.short())
}

pub fn join_output_names(
    left: (&CollectionId, &BTreeSet<String>),
    right: (&CollectionId, &BTreeSet<String>),
    left_key: &str,
    right_key: &str,
) -> Result<JoinNaming, DocumentError> {
    let (left_cid, left_schema) = left;
    let (right_cid, right_schema) = right;
    let mut columns = Vec::new();
    for a in left_schema {
        let shared = a != left_key && a != right_key && right_schema.contains(a);
        let out = if shared { prefixed(left_cid, a) } else { a.clone() };
        columns.push((JoinSide::Left, a.clone(), out));
    }
    for a in right_schema.iter().filter(|a| *a != right_key) {
        let out = if left_schema.contains(a) { prefixed(right_cid, a) } else { a.clone() };
        columns.push((JoinSide::Right, a.clone(), out));
    }
    let mut seen = BTreeSet::new();
    for (_, _, out) in &columns {
        if !seen.insert(out) {
            return Err(DocumentError::Schema(format!("join output name {out} is ambiguous")));
        }
    }
    Ok(JoinNaming { columns, left_key: left_key.to_owned(), right_key: right_key.to_owned() })
}

/// Derived id of a join result.
pub fn joined_cid(left: &CollectionId, right: &CollectionId) -> CollectionId {
    CollectionId(sha256_parts(&[b"qshield/join/v1\0", left.as_bytes(), right.as_bytes()]))
}

/// Nested-loop equi-join: `c1` outer, `c2` inner.
pub fn join(c1: &Collection, c2: &Collection, p: &Predicate) -> Result<Collection, DocumentError> {
    let Operand::Attribute(rhs) = &p.rhs else {
        return Err(DocumentError::Predicate("join needs an attribute right-hand side".into()));
    };
    if p.op != CmpOp::Eq {
        return Err(DocumentError::Predicate(format!(
            "join supports equality only, got {}",
            p.op.symbol()
        )));
    }
    let lk = &p.lhs.attribute;
    let rk = &rhs.attribute;
    require_attr(c1, lk)?;
    require_attr(c2, rk)?;
    let naming = join_output_names((&c1.cid(), c1.schema()), (&c2.cid(), c2.schema()), lk, rk)?;
    let left_cols: Vec<(&String, &String)> = naming
        .columns
        .iter()
        .filter(|(s, _, _)| *s == JoinSide::Left)
        .map(|(_, src, out)| (src, out))
        .collect();
    let right_cols: Vec<(&String, &String)> = naming
        .columns
        .iter()
        .filter(|(s, _, _)| *s == JoinSide::Right)
        .map(|(_, src, out)| (src, out))
        .collect();

    let mut docs = Vec::new();
    for d1 in c1.docs() {
        let key = d1.get(lk).expect("schema checked");
        for d2 in c2.docs() {
            if !key.scalar_eq(d2.get(rk).expect("schema checked")) {
                continue;
            }
            let mut merged = BTreeMap::new();
            for (src, out) in &left_cols {
                merged.insert((*out).clone(), d1.get(src).expect("schema checked").clone());
            }
            for (src, out) in &right_cols {
                merged.insert((*out).clone(), d2.get(src).expect("schema checked").clone());
            }
            docs.push(Document::from_map(merged));
        }
    }
    Ok(Collection::from_parts_unchecked(
        format!("{}+{}", c1.name(), c2.name()),
        joined_cid(&c1.cid(), &c2.cid()),
        naming.output_schema(),
        docs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> Collection {
        let docs = (0..6i64)
            .map(|i| Document::new().with("A1", i).with("A3", i % 3).with("A5", format!("s{i}")))
            .collect();
        Collection::named("C1", docs).unwrap()
    }

    fn c2() -> Collection {
        let docs = (0..4i64)
            .map(|i| Document::new().with("A2", i * 10).with("A3", i).with("A4", i + 100))
            .collect();
        Collection::named("C2", docs).unwrap()
    }

    fn names(list: &[&str]) -> BTreeSet<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn projection_prunes_and_preserves_order() {
        let p = project(&c1(), &names(&["A3"])).unwrap();
        assert_eq!(p.schema(), &names(&["A3"]));
        assert_eq!(p.len(), 6);
        let a3: Vec<_> = p.docs().iter().map(|d| d.get("A3").unwrap().clone()).collect();
        assert_eq!(a3, [0, 1, 2, 0, 1, 2].map(Value::Int));
        assert_eq!(project(&c1(), c1().schema()).unwrap(), c1());
        assert!(matches!(project(&c1(), &names(&["Ax"])), Err(DocumentError::Schema(_))));
    }

    #[test]
    fn selection_filters_in_order() {
        let p = Predicate::literal(AttrRef::new("C1", "A1"), CmpOp::Le, 2i64);
        let s = select(&c1(), &p).unwrap();
        assert_eq!(s.docs(), &c1().docs()[..3]);
        let empty = Collection::named("E", vec![]).unwrap();
        let e = select(
            &Collection::new("E", empty.cid(), names(&["A1"]), vec![]).unwrap(),
            &p,
        )
        .unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn constant_column_tautology_keeps_everything() {
        let docs = (0..5i64).map(|i| Document::new().with("k", 1i64).with("v", i)).collect();
        let c = Collection::named("K", docs).unwrap();
        let p = Predicate::literal(AttrRef::new("K", "k"), CmpOp::Eq, 1i64);
        assert_eq!(select(&c, &p).unwrap(), c);
    }

    #[test]
    fn ordering_on_strings_is_a_predicate_error() {
        let p = Predicate::literal(AttrRef::new("C1", "A5"), CmpOp::Lt, 3i64);
        assert!(matches!(select(&c1(), &p), Err(DocumentError::Predicate(_))));
        let p = Predicate::literal(AttrRef::new("C1", "A1"), CmpOp::Lt, "x");
        assert!(matches!(select(&c1(), &p), Err(DocumentError::Predicate(_))));
        let p = Predicate::literal(AttrRef::new("C1", "A5"), CmpOp::Eq, "s3");
        assert_eq!(select(&c1(), &p).unwrap().len(), 1);
    }

    #[test]
    fn aggregates() {
        assert_eq!(aggregate(&c2(), AggregateFn::Sum, "A4").unwrap(), Value::Int(406));
        assert_eq!(aggregate(&c2(), AggregateFn::Count, "A4").unwrap(), Value::Int(4));
        assert_eq!(aggregate(&c2(), AggregateFn::Min, "A2").unwrap(), Value::Int(0));
        assert_eq!(aggregate(&c2(), AggregateFn::Max, "A2").unwrap(), Value::Int(30));
        let two_four = Collection::named(
            "T",
            vec![Document::new().with("x", 2i64), Document::new().with("x", 4i64)],
        )
        .unwrap();
        assert_eq!(aggregate(&two_four, AggregateFn::Avg, "x").unwrap(), Value::Float(3.0));
        assert!(matches!(aggregate(&c1(), AggregateFn::Sum, "A5"), Err(DocumentError::Type(_))));
        let empty = Collection::new("E", CollectionId([0; 32]), names(&["x"]), vec![]).unwrap();
        assert_eq!(aggregate(&empty, AggregateFn::Count, "x").unwrap(), Value::Int(0));
        assert_eq!(aggregate(&empty, AggregateFn::Sum, "x"), Err(DocumentError::EmptyAggregate));
    }

    #[test]
    fn integer_sum_overflow_is_reported() {
        let c = Collection::named(
            "O",
            vec![Document::new().with("x", i64::MAX), Document::new().with("x", 1i64)],
        )
        .unwrap();
        assert_eq!(aggregate(&c, AggregateFn::Sum, "x"), Err(DocumentError::Overflow));
    }

    #[test]
    fn join_on_shared_key() {
        let left = project(&c1(), &names(&["A3"])).unwrap();
        let right = project(&c2(), &names(&["A3", "A4"])).unwrap();
        let p = Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3"));
        let j = join(&left, &right, &p).unwrap();
        assert_eq!(j.schema(), &names(&["A3", "A4"]));
        // keys 0,1,2 each appear twice on the left and once on the right
        assert_eq!(j.len(), 6);
        assert_eq!(aggregate(&j, AggregateFn::Sum, "A4").unwrap(), Value::Int(2 * (100 + 101 + 102)));
    }

    #[test]
    fn join_prefixes_colliding_names() {
        let p = Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3"));
        let c1b = Collection::named(
            "C1",
            vec![Document::new().with("A3", 1i64).with("A4", 5i64)],
        )
        .unwrap();
        let j = join(&c1b, &c2(), &p).unwrap();
        let l = format!("c{}_A4", c1b.cid().short());
        let r = format!("c{}_A4", c2().cid().short());
        assert_eq!(j.schema(), &names(&["A2", "A3", l.as_str(), r.as_str()]));
        assert_eq!(j.docs()[0].get(&l), Some(&Value::Int(5)));
        assert_eq!(j.docs()[0].get(&r), Some(&Value::Int(101)));
    }

    #[test]
    fn join_rejects_non_equality_and_disjoint_keys_give_empty() {
        let mut p = Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3"));
        p.op = CmpOp::Lt;
        assert!(matches!(join(&c1(), &c2(), &p), Err(DocumentError::Predicate(_))));
        let far = Collection::named("C2", vec![Document::new().with("A3", 99i64)]).unwrap();
        let p = Predicate::join_eq(AttrRef::new("C1", "A3"), AttrRef::new("C2", "A3"));
        assert!(join(&c1(), &far, &p).unwrap().is_empty());
    }
}

//! SQL-like query frontend: parsing, plan compilation, and the endurance
//! budget a plan needs.

mod parser;
mod plan;

pub use parser::{parse, AttrName, JoinClause, ParseError, Query, SelectList, WhereClause};
pub use plan::{
    compute_endurance, evaluate_plan, operator_kinds, plan, Catalog, CatalogEntry, PlanError, PlanNode, PlanOp,
    QueryPlan,
};

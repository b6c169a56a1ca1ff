//! Dsl2data: parse, calibrate, route, compile and execute analysis queries.

mod calibrate;
mod engine;
mod plan;
mod query;

use thiserror::Error;

pub use calibrate::{calibrate, CalibrationReport};
pub use engine::{
    round_sig, DslEngine, ExecError, ExecutionResults, FeedbackPackage, QueryOutcome, QueryResult, Status,
    DEFAULT_BUDGET,
};
pub use plan::{plan, plan_with_route, CompareSql, QueryPlan, Route};
pub use query::{
    Compare, Condition, DslQuery, FilterItem, FilterNode, OrderBy, OrderType, QueryRule, Relation, Scalar,
    DEFAULT_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    /// The payload is not valid JSON.
    #[error("request is not valid JSON: {0}")]
    Syntax(String),
    #[error("schema error at `{property}`: {message}")]
    Schema { property: String, message: String },
    #[error("cannot plan query: {0}")]
    Plan(String),
    #[error("cannot export results: {0}")]
    Export(String),
}

impl<'de> serde::Deserialize<'de> for DslQuery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        DslQuery::from_value(&v).map_err(serde::de::Error::custom)
    }
}

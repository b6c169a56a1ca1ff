//! Dsl2data request types and the schema-checking parser.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::DslError;
use crate::warehouse::parse_ds;

pub const DEFAULT_LIMIT: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderType {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderBy {
    #[serde(rename = "columnEName")]
    pub column: String,
    #[serde(rename = "orderType")]
    pub order: OrderType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compare {
    Wow,
    Yoy,
}

impl Compare {
    pub fn as_str(self) -> &'static str {
        match self {
            Compare::Wow => "wow",
            Compare::Yoy => "yoy",
        }
    }

    pub fn shift_days(self) -> u64 {
        match self {
            Compare::Wow => 7,
            Compare::Yoy => 365,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryRule {
    In,
    Eq,
    Neq,
    Gt,
    Lt,
    Between,
}

impl QueryRule {
    fn arity_ok(self, n: usize) -> bool {
        match self {
            QueryRule::In => n >= 1,
            QueryRule::Between => n == 2,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    #[serde(rename = "columnEName")]
    pub column: String,
    #[serde(rename = "queryRule")]
    pub rule: QueryRule,
    pub params: Vec<Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterItem {
    Condition(Condition),
    Node(FilterNode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterNode {
    pub relation: Relation,
    pub conditions: Vec<FilterItem>,
}

impl FilterNode {
    /// Every leaf condition, depth first.
    pub fn leaves(&self) -> Vec<&Condition> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Condition>) {
        for item in &self.conditions {
            match item {
                FilterItem::Condition(c) => out.push(c),
                FilterItem::Node(n) => n.collect(out),
            }
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut Condition> {
        let mut out = Vec::new();
        for item in &mut self.conditions {
            match item {
                FilterItem::Condition(c) => out.push(c),
                FilterItem::Node(n) => out.extend(n.leaves_mut()),
            }
        }
        out
    }
}

/// One Dsl2data request. Field order matches the wire format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DslQuery {
    pub metric: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dimension: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterNode>,
    pub ds: [String; 2],
    #[serde(rename = "orderBy", skip_serializing_if = "Vec::is_empty")]
    pub order_by: Vec<OrderBy>,
    pub limit: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<Compare>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_data_path: Option<String>,
}

impl DslQuery {
    pub fn new(metric: &[&str], ds: (&str, &str)) -> Self {
        Self {
            metric: metric.iter().map(|s| s.to_string()).collect(),
            dimension: Vec::new(),
            filter: None,
            ds: [ds.0.to_string(), ds.1.to_string()],
            order_by: Vec::new(),
            limit: DEFAULT_LIMIT,
            compare: Vec::new(),
            save_data_path: None,
        }
    }

    pub fn with_dimensions(mut self, dims: &[&str]) -> Self {
        self.dimension = dims.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("query serializes")
    }

    /// Parses a serialized request. Errors name the offending property.
    pub fn parse(payload: &str) -> Result<Self, DslError> {
        let value: Value = serde_json::from_str(payload).map_err(|e| DslError::Syntax(e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, DslError> {
        let obj = value
            .as_object()
            .ok_or_else(|| schema("$", "request must be an object"))?;
        const KNOWN: [&str; 8] = ["metric", "ds", "dimension", "filter", "orderBy", "limit", "compare", "save_data_path"];
        if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(schema(k, "unknown property"));
        }

        let metric = string_list(obj, "metric")?.ok_or_else(|| schema("metric", "required property missing"))?;
        if metric.is_empty() {
            return Err(schema("metric", "must list at least one metric"));
        }
        let ds = string_list(obj, "ds")?.ok_or_else(|| schema("ds", "required property missing"))?;
        let [d0, d1]: [String; 2] = ds
            .try_into()
            .map_err(|_| schema("ds", "must be [\"YYYYMMDD\", \"YYYYMMDD\"]"))?;
        match (parse_ds(&d0), parse_ds(&d1)) {
            (Some(a), Some(b)) if a <= b => {}
            (Some(_), Some(_)) => return Err(schema("ds", "start date is after end date")),
            _ => return Err(schema("ds", "dates must be valid YYYYMMDD")),
        }
        let dimension = string_list(obj, "dimension")?.unwrap_or_default();

        let filter = match obj.get("filter") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_filter(v, "filter")?),
        };

        let order_by = match obj.get("orderBy") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| parse_order(v, &format!("orderBy[{i}]")))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(schema("orderBy", "must be an array")),
        };

        let limit = match obj.get("limit") {
            None | Some(Value::Null) => DEFAULT_LIMIT,
            Some(v) => match v.as_u64() {
                Some(n) if n >= 1 => n,
                _ => return Err(schema("limit", "must be a positive integer")),
            },
        };

        let compare = match obj.get("compare") {
            None | Some(Value::Null) => Vec::new(),
            Some(v) => serde_json::from_value::<Vec<Compare>>(v.clone())
                .map_err(|_| schema("compare", "must be an array of \"wow\" / \"yoy\""))?,
        };

        let save_data_path = match obj.get("save_data_path") {
            None | Some(Value::Null) => None,
            Some(Value::String(p)) => {
                check_relative_path(p)?;
                Some(p.clone())
            }
            Some(_) => return Err(schema("save_data_path", "must be a string")),
        };

        Ok(Self {
            metric,
            dimension,
            filter,
            ds: [d0, d1],
            order_by,
            limit,
            compare,
            save_data_path,
        })
    }
}

fn schema(property: &str, message: &str) -> DslError {
    DslError::Schema {
        property: property.to_string(),
        message: message.to_string(),
    }
}

fn string_list(obj: &Map<String, Value>, key: &str) -> Result<Option<Vec<String>>, DslError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
                _ => Err(schema(key, "items must be non-empty strings")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(schema(key, "must be an array of strings")),
    }
}

fn check_relative_path(p: &str) -> Result<(), DslError> {
    let path = std::path::Path::new(p);
    if p.is_empty() || path.is_absolute() || p.starts_with('/') || p.starts_with('\\') {
        return Err(schema("save_data_path", "must be a relative path"));
    }
    if path.components().any(|c| matches!(c, std::path::Component::ParentDir)) || p.split(['/', '\\']).any(|s| s == "..") {
        return Err(schema("save_data_path", "must not traverse parent directories"));
    }
    Ok(())
}

fn parse_order(v: &Value, at: &str) -> Result<OrderBy, DslError> {
    let obj = v.as_object().ok_or_else(|| schema(at, "must be an object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "columnEName" && *k != "orderType") {
        return Err(schema(&format!("{at}.{k}"), "unknown property"));
    }
    let column = match obj.get("columnEName") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Err(schema(&format!("{at}.columnEName"), "required non-empty string")),
    };
    let order = match obj.get("orderType") {
        None => OrderType::Desc,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| schema(&format!("{at}.orderType"), "must be \"asc\" or \"desc\""))?,
    };
    Ok(OrderBy { column, order })
}

fn parse_filter(v: &Value, at: &str) -> Result<FilterNode, DslError> {
    let obj = v.as_object().ok_or_else(|| schema(at, "must be an object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "relation" && *k != "conditions") {
        return Err(schema(&format!("{at}.{k}"), "unknown property"));
    }
    let relation = match obj.get("relation") {
        None => Relation::And,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| schema(&format!("{at}.relation"), "must be \"and\" or \"or\""))?,
    };
    let items = match obj.get("conditions") {
        Some(Value::Array(items)) if !items.is_empty() => items,
        _ => return Err(schema(&format!("{at}.conditions"), "must be a non-empty array")),
    };
    let mut conditions = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let here = format!("{at}.conditions[{i}]");
        let is_node = item.as_object().is_some_and(|o| o.contains_key("relation") || !o.contains_key("columnEName"));
        if is_node && item.get("conditions").is_some() {
            conditions.push(FilterItem::Node(parse_filter(item, &here)?));
        } else {
            conditions.push(FilterItem::Condition(parse_condition(item, &here)?));
        }
    }
    Ok(FilterNode { relation, conditions })
}

fn parse_condition(v: &Value, at: &str) -> Result<Condition, DslError> {
    let obj = v.as_object().ok_or_else(|| schema(at, "must be an object"))?;
    if let Some(k) = obj.keys().find(|k| !["columnEName", "queryRule", "params"].contains(&k.as_str())) {
        return Err(schema(&format!("{at}.{k}"), "unknown property"));
    }
    let column = match obj.get("columnEName") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Err(schema(&format!("{at}.columnEName"), "required non-empty string")),
    };
    let rule: QueryRule = obj
        .get("queryRule")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| schema(&format!("{at}.queryRule"), "must be one of in, eq, neq, gt, lt, between"))?;
    let params: Vec<Scalar> = match obj.get("params") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|p| match p {
                Value::String(s) => Ok(Scalar::Text(s.clone())),
                Value::Number(n) => Ok(n.as_i64().map(Scalar::Int).unwrap_or_else(|| Scalar::Float(n.as_f64().unwrap_or(0.0)))),
                _ => Err(schema(&format!("{at}.params"), "params must be strings or numbers")),
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(schema(&format!("{at}.params"), "must be an array")),
    };
    if !rule.arity_ok(params.len()) {
        return Err(schema(
            &format!("{at}.params"),
            &format!("wrong number of params ({}) for queryRule", params.len()),
        ));
    }
    Ok(Condition { column, rule, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"{
      "metric": ["Net_GMV"],
      "dimension": ["Gender"],
      "filter": {
        "relation": "and",
        "conditions": [
          {"columnEName": "brand_id", "queryRule": "in", "params": ["xxx"]}
        ]
      },
      "ds": ["20251010", "20251110"],
      "orderBy": [{"columnEName": "Net_GMV", "orderType": "desc"}],
      "limit": 10
    }"#;

    #[test]
    fn example_request_parses() {
        let q = DslQuery::parse(EXAMPLE).unwrap();
        assert_eq!(q.limit, 10);
        assert_eq!(q.order_by[0].column, "Net_GMV");
        assert_eq!(q.order_by[0].order, OrderType::Desc);
        assert_eq!(q.filter.as_ref().unwrap().leaves()[0].column, "brand_id");
    }

    #[test]
    fn limit_defaults() {
        let q = DslQuery::parse(r#"{"metric":["gmv"],"ds":["20251001","20251007"]}"#).unwrap();
        assert_eq!(q.limit, 100);
    }

    fn prop(payload: &str) -> String {
        match DslQuery::parse(payload) {
            Err(DslError::Schema { property, .. }) => property,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_property() {
        assert_eq!(prop(r#"{"ds":["20251001","20251007"]}"#), "metric");
        assert_eq!(prop(r#"{"metric":["gmv"]}"#), "ds");
        assert_eq!(prop(r#"{"metric":["gmv"],"ds":["20251008","20251007"]}"#), "ds");
        assert_eq!(prop(r#"{"metric":["gmv"],"ds":["20251001","20251007"],"limit":0}"#), "limit");
        assert_eq!(prop(r#"{"metric":["gmv"],"ds":["20251001","20251007"],"colour":1}"#), "colour");
        assert_eq!(
            prop(r#"{"metric":["gmv"],"ds":["20251001","20251007"],"save_data_path":"../x.csv"}"#),
            "save_data_path"
        );
        assert_eq!(
            prop(r#"{"metric":["gmv"],"ds":["20251001","20251007"],"filter":{"relation":"and","conditions":[{"columnEName":"x","queryRule":"between","params":[1]}]}}"#),
            "filter.conditions[0].params"
        );
    }

    #[test]
    fn nested_filters() {
        let q = DslQuery::parse(
            r#"{"metric":["gmv"],"ds":["20251001","20251007"],"filter":{"relation":"or","conditions":[
                {"columnEName":"city","queryRule":"eq","params":["Hangzhou"]},
                {"relation":"and","conditions":[{"columnEName":"gender","queryRule":"neq","params":["Male"]}]}]}}"#,
        )
        .unwrap();
        let f = q.filter.unwrap();
        assert_eq!(f.leaves().len(), 2);
        assert!(matches!(f.conditions[1], FilterItem::Node(_)));
    }

    #[test]
    fn not_json_is_syntax_error() {
        assert!(matches!(DslQuery::parse("{metric"), Err(DslError::Syntax(_))));
    }
}

//! Execution, caching and the dual-channel feedback package.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::{Connection, ErrorCode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::calibrate::{calibrate, CalibrationReport};
use super::plan::{plan, plan_with_route, QueryPlan, Route};
use super::query::{DslQuery, OrderType};
use super::DslError;
use crate::catalog::Catalog;
use crate::warehouse::WarehouseHandle;

pub const DEFAULT_BUDGET: Duration = Duration::from_secs(60);
const PREVIEW_ROWS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Success,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    pub preview: Vec<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPackage {
    pub calibration_report: CalibrationReport,
    pub execution_results: ExecutionResults,
    pub status: Status,
}

impl FeedbackPackage {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("package serializes")
    }
}

/// A fully materialized result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl QueryResult {
    pub fn row_objects(&self, n: usize) -> Vec<Map<String, Value>> {
        self.rows
            .iter()
            .take(n)
            .map(|r| self.columns.iter().cloned().zip(r.iter().cloned()).collect())
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DslError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DslError::Export(e.to_string()))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| DslError::Export(e.to_string()))?;
        w.write_record(&self.columns).map_err(|e| DslError::Export(e.to_string()))?;
        for row in &self.rows {
            let rec: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Value::Null => String::new(),
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            w.write_record(&rec).map_err(|e| DslError::Export(e.to_string()))?;
        }
        w.flush().map_err(|e| DslError::Export(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecError {
    Timeout,
    Store(String),
}

/// Everything produced while answering one request.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub package: FeedbackPackage,
    pub plan: Option<QueryPlan>,
    pub result: Option<Arc<QueryResult>>,
    pub cached: bool,
}

/// Rounds to 12 significant digits so that aggregates summed in a
/// different order (ADS vs DWS) print identically.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn normalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round_sig(f)))
            .map(Value::Number)
            .unwrap_or(Value::Null),
        other => other,
    }
}

fn cmp_values(a: &Value, b: &Value) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match (a, b) {
        (Value::Null, Value::Null) => Equal,
        (Value::Null, _) => Greater,
        (_, Value::Null) => Less,
        (Value::Number(x), Value::Number(y)) => {
            x.as_f64().unwrap_or(0.0).total_cmp(&y.as_f64().unwrap_or(0.0))
        }
        (Value::String(x), Value::String(y)) => x.cmp(y),
        _ => a.to_string().cmp(&b.to_string()),
    }
}

fn run_sql(conn: &Connection, sql: &str, deadline: Instant) -> Result<QueryResult, ExecError> {
    if Instant::now() >= deadline {
        return Err(ExecError::Timeout);
    }
    conn.progress_handler(1000, Some(move || Instant::now() >= deadline));
    let out = (|| -> rusqlite::Result<QueryResult> {
        let mut st = conn.prepare(sql)?;
        let columns: Vec<String> = st.column_names().iter().map(|c| c.to_string()).collect();
        let n = columns.len();
        let mut rows = st.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut r = Vec::with_capacity(n);
            for i in 0..n {
                r.push(normalize(crate::warehouse::cell_to_json(row.get_ref(i)?)));
            }
            out.push(r);
        }
        Ok(QueryResult { columns, rows: out })
    })();
    conn.progress_handler(0, None::<fn() -> bool>);
    out.map_err(|e| match e {
        rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted => ExecError::Timeout,
        e => ExecError::Store(e.to_string()),
    })
}

/// The Dsl2data engine: calibrate, plan, execute, cache, export.
pub struct DslEngine {
    catalog: Arc<Catalog>,
    warehouse: Arc<WarehouseHandle>,
    budget: Duration,
    export_root: Option<PathBuf>,
    default_export: bool,
    cache: Mutex<HashMap<String, Arc<QueryResult>>>,
    hits: AtomicU64,
}

impl DslEngine {
    pub fn new(catalog: Arc<Catalog>, warehouse: Arc<WarehouseHandle>) -> Self {
        Self {
            catalog,
            warehouse,
            budget: DEFAULT_BUDGET,
            export_root: None,
            default_export: false,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
        }
    }

    pub fn with_budget(mut self, budget: Duration) -> Self {
        self.budget = budget;
        self
    }

    /// CSV exports land under `root`. With `default_export`, every
    /// successful query is exported even without `save_data_path`.
    pub fn with_exports(mut self, root: impl Into<PathBuf>, default_export: bool) -> Self {
        self.export_root = Some(root.into());
        self.default_export = default_export;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn warehouse(&self) -> &WarehouseHandle {
        &self.warehouse
    }

    pub fn budget(&self) -> Duration {
        self.budget
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Drops cached results, e.g. after the warehouse file was regenerated.
    pub fn reload(&self) {
        self.cache.lock().expect("cache lock").clear();
    }

    /// Parses and answers a serialized request. Only malformed requests
    /// are errors; everything else is reported inside the package.
    pub fn run_payload(&self, payload: &str) -> Result<QueryOutcome, DslError> {
        Ok(self.run(&DslQuery::parse(payload)?))
    }

    pub fn run(&self, query: &DslQuery) -> QueryOutcome {
        self.run_with(query, None, self.budget)
    }

    pub fn run_with_budget(&self, query: &DslQuery, budget: Duration) -> QueryOutcome {
        self.run_with(query, None, budget)
    }

    /// Answers a query on a fixed route, bypassing the router.
    pub fn run_forced(&self, query: &DslQuery, route: Route) -> QueryOutcome {
        self.run_with(query, Some(route), self.budget)
    }

    fn run_with(&self, query: &DslQuery, route: Option<Route>, budget: Duration) -> QueryOutcome {
        let (calibrated, report) = calibrate(query, &self.catalog);
        let fail = |report: CalibrationReport, status: Status, error: String, plan: Option<QueryPlan>| QueryOutcome {
            package: FeedbackPackage {
                calibration_report: report,
                execution_results: ExecutionResults {
                    data_path: None,
                    preview: Vec::new(),
                    error: Some(error),
                },
                status,
            },
            plan,
            result: None,
            cached: false,
        };
        if !report.is_executable() {
            let n = report.violations.len();
            return fail(report, Status::Error, format!("query rejected: {n} boundary violation(s)"), None);
        }
        let planned = match route {
            Some(r) => plan_with_route(&calibrated, &self.catalog, r),
            None => plan(&calibrated, &self.catalog),
        };
        let qp = match planned {
            Ok(p) => p,
            Err(e) => return fail(report, Status::Error, e.to_string(), None),
        };
        let (result, cached) = match self.execute(&qp, budget) {
            Ok(r) => r,
            Err(ExecError::Timeout) => {
                let msg = format!("query exceeded the {} ms budget", budget.as_millis());
                return fail(report, Status::Timeout, msg, Some(qp));
            }
            Err(ExecError::Store(e)) => return fail(report, Status::Error, e, Some(qp)),
        };
        let data_path = match self.export(&qp, &result) {
            Ok(p) => p,
            Err(e) => return fail(report, Status::Error, e.to_string(), Some(qp)),
        };
        let preview = result.row_objects(qp.query.limit.min(PREVIEW_ROWS) as usize);
        QueryOutcome {
            package: FeedbackPackage {
                calibration_report: report,
                execution_results: ExecutionResults {
                    data_path,
                    preview,
                    error: None,
                },
                status: Status::Success,
            },
            plan: Some(qp),
            result: Some(result),
            cached,
        }
    }

    fn export(&self, qp: &QueryPlan, result: &QueryResult) -> Result<Option<String>, DslError> {
        let rel = match (&qp.query.save_data_path, self.default_export) {
            (Some(p), _) => p.clone(),
            (None, true) => format!("exports/{}.csv", &qp.cache_key[..16]),
            (None, false) => return Ok(None),
        };
        let root = self
            .export_root
            .as_ref()
            .ok_or_else(|| DslError::Export("no export directory configured".into()))?;
        result.write_csv(&root.join(&rel))?;
        Ok(Some(rel))
    }

    /// Runs a plan against the warehouse, serving repeats from the cache.
    pub fn execute(&self, qp: &QueryPlan, budget: Duration) -> Result<(Arc<QueryResult>, bool), ExecError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&qp.cache_key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((hit.clone(), true));
        }
        let deadline = Instant::now() + budget;
        let conn = self.warehouse.acquire().map_err(|e| ExecError::Store(e.to_string()))?;
        let out = execute_plan(&conn, qp, deadline);
        self.warehouse.release(conn);
        let result = Arc::new(out?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(qp.cache_key.clone(), result.clone());
        Ok((result, false))
    }
}

fn execute_plan(conn: &Connection, qp: &QueryPlan, deadline: Instant) -> Result<QueryResult, ExecError> {
    let mut main = run_sql(conn, &qp.sql_text, deadline)?;
    main.columns = qp.columns.clone();
    let n_dims = qp.query.dimension.len();
    for cmp in &qp.compare {
        let prior = run_sql(conn, &cmp.sql_text, deadline)?;
        let index: HashMap<String, &Vec<Value>> = prior
            .rows
            .iter()
            .map(|r| (Value::Array(r[..n_dims].to_vec()).to_string(), r))
            .collect();
        for m in &qp.query.metric {
            main.columns.push(format!("{m}_{}", cmp.compare.as_str()));
            main.columns.push(format!("{m}_{}_pct", cmp.compare.as_str()));
        }
        for row in main.rows.iter_mut() {
            let key = Value::Array(row[..n_dims].to_vec()).to_string();
            let before = index.get(&key);
            for j in 0..qp.query.metric.len() {
                let cur = row[n_dims + j].as_f64();
                let prev = before.and_then(|r| r[n_dims + j].as_f64());
                let (delta, pct) = match (cur, prev) {
                    (Some(c), Some(p)) => {
                        let d = c - p;
                        (Some(d), (p != 0.0).then(|| d / p * 100.0))
                    }
                    _ => (None, None),
                };
                let num = |x: Option<f64>| {
                    x.and_then(|v| serde_json::Number::from_f64(round_sig(v)))
                        .map(Value::Number)
                        .unwrap_or(Value::Null)
                };
                row.push(num(delta));
                row.push(num(pct));
            }
        }
    }
    if let Some(order) = &qp.post_sort {
        let keys: Vec<(usize, OrderType)> = order
            .iter()
            .filter_map(|(c, o)| main.column(c).map(|i| (i, *o)))
            .collect();
        main.rows.sort_by(|a, b| {
            for (i, o) in &keys {
                let ord = match (&a[*i], &b[*i]) {
                    (Value::Null, _) | (_, Value::Null) => cmp_values(&a[*i], &b[*i]),
                    _ if *o == OrderType::Desc => cmp_values(&b[*i], &a[*i]),
                    _ => cmp_values(&a[*i], &b[*i]),
                };
                if ord != std::cmp::Ordering::Equal {
                    return ord;
                }
            }
            std::cmp::Ordering::Equal
        });
        main.rows.truncate(qp.query.limit as usize);
    }
    Ok(main)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warehouse::{generate, WarehouseConfig};

    fn engine(dir: &Path) -> DslEngine {
        let (h, _) = generate(&WarehouseConfig::small(11), &dir.join("w.db")).unwrap();
        DslEngine::new(Arc::new(Catalog::default_catalog()), Arc::new(h)).with_exports(dir.join("out"), false)
    }

    const LISTING: &str = r#"{"metric":["gmv","aov"],"dimension":["week"],"ds":["20250915","20251012"],
        "filter":{"relation":"and","conditions":[{"columnEName":"shop","queryRule":"eq","params":["Sunny Basket"]}]}}"#;

    #[test]
    fn listing_query_yields_weekend_and_weekday() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let out = e.run_payload(LISTING).unwrap();
        assert_eq!(out.package.status, Status::Success, "{:?}", out.package.execution_results.error);
        let preview = &out.package.execution_results.preview;
        assert_eq!(preview.len(), 2);
        let labels: Vec<&str> = preview.iter().map(|r| r["isWeek"].as_str().unwrap()).collect();
        assert_eq!(labels, vec!["Weekday", "Weekend"]);
        assert!(preview.iter().all(|r| r.contains_key("netGMV") && r.contains_key("netAov")));
        assert_eq!(out.package.calibration_report.notices.len(), 4);
    }

    #[test]
    fn repeat_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let a = e.run_payload(LISTING).unwrap();
        let b = e.run_payload(LISTING).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.package.to_json_pretty(), b.package.to_json_pretty());
        e.reload();
        assert!(!e.run_payload(LISTING).unwrap().cached);
    }

    #[test]
    fn zero_budget_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let q = DslQuery::parse(LISTING).unwrap();
        let out = e.run_with_budget(&q, Duration::ZERO);
        assert_eq!(out.package.status, Status::Timeout);
        assert!(out.package.execution_results.preview.is_empty());
    }

    #[test]
    fn violations_block_execution() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let out = e.run(&DslQuery::new(&["noSuchMetric"], ("20250915", "20250920")));
        assert_eq!(out.package.status, Status::Error);
        assert!(out.plan.is_none());
        assert_eq!(out.package.calibration_report.violations.len(), 1);
    }

    #[test]
    fn save_data_path_writes_csv_with_canonical_header() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let out = e
            .run_payload(r#"{"metric":["gmv"],"dimension":["userLevel"],"ds":["20250915","20250921"],"save_data_path":"a/b.csv"}"#)
            .unwrap();
        assert_eq!(out.package.execution_results.data_path.as_deref(), Some("a/b.csv"));
        let text = std::fs::read_to_string(dir.path().join("out/a/b.csv")).unwrap();
        assert!(text.starts_with("userLevel,netGMV\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn preview_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let out = e.run_payload(r#"{"metric":["gmv"],"dimension":["ds"],"ds":["20250915","20251012"]}"#).unwrap();
        assert_eq!(out.package.execution_results.preview.len(), 10);
        assert_eq!(out.result.unwrap().rows.len(), 28);
        let out = e
            .run_payload(r#"{"metric":["gmv"],"dimension":["ds"],"ds":["20250915","20251012"],"limit":3}"#)
            .unwrap();
        assert_eq!(out.package.execution_results.preview.len(), 3);
    }

    #[test]
    fn forced_routes_agree() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let q = DslQuery::new(&["netGMV", "avgOrderValue", "discountRate"], ("20250915", "20251012"))
            .with_dimensions(&["shopName", "ds"]);
        let a = e.run_forced(&q, Route::Ads);
        let d = e.run_forced(&q, Route::Dws);
        assert_eq!(a.plan.as_ref().unwrap().route, Route::Ads);
        assert_eq!(d.plan.as_ref().unwrap().route, Route::Dws);
        assert_eq!(a.result.unwrap().rows, d.result.unwrap().rows);
    }

    #[test]
    fn compare_appends_delta_columns() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let out = e
            .run_payload(r#"{"metric":["orderCnt"],"dimension":["userLevel"],"ds":["20250922","20250928"],"compare":["wow"]}"#)
            .unwrap();
        let r = out.result.unwrap();
        assert_eq!(r.columns, vec!["userLevel", "orderCnt", "orderCnt_wow", "orderCnt_wow_pct"]);
        let prior = e
            .run_payload(r#"{"metric":["orderCnt"],"dimension":["userLevel"],"ds":["20250915","20250921"]}"#)
            .unwrap()
            .result
            .unwrap();
        for (cur, old) in r.rows.iter().zip(prior.rows.iter()) {
            let delta = cur[1].as_f64().unwrap() - old[1].as_f64().unwrap();
            assert_eq!(cur[2].as_f64().unwrap(), delta);
        }
    }
}

//! Synthetic instant-retail warehouse.
//!
//! Generates the seven physical tables (`dws_trd`, `dws_log`, `dim_usr`,
//! `dim_shop`, `dim_date`, `ads_shop`, `ads_brand`) from a seeded config,
//! plants anomaly scenarios with exact ground truth, and serves the result
//! as a read-only SQLite snapshot.

mod generate;
mod scenario;
mod store;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::NaiveDate;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scenario::{Direction, Effect, GroundTruth, PlantedCause, Scenario, Target, TargetKind};
pub use store::{cell_to_json, ADS_BRAND_KEYS, ADS_LOG_SUMS, ADS_SHOP_KEYS, ADS_TABLES, ADS_TRD_SUMS, ALL_TABLES, DWS_TABLES};

#[derive(Debug, Error)]
pub enum WarehouseError {
    #[error("invalid warehouse config: {0}")]
    Config(String),
    #[error("scenario `{id}` cannot be planted: {reason}")]
    Scenario { id: String, reason: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("store error: {0}")]
    Store(#[from] rusqlite::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseRates {
    pub orders_per_shop_day: f64,
    pub sessions_per_order: f64,
    pub mean_basket: f64,
    pub coupon_prob: f64,
    pub refund_prob: f64,
    pub cancel_prob: f64,
    pub review_prob: f64,
    pub weekend_lift: f64,
    pub holiday_lift: f64,
}

impl Default for BaseRates {
    fn default() -> Self {
        Self {
            orders_per_shop_day: 45.0,
            sessions_per_order: 3.0,
            mean_basket: 38.0,
            coupon_prob: 0.35,
            refund_prob: 0.04,
            cancel_prob: 0.02,
            review_prob: 0.3,
            weekend_lift: 1.25,
            holiday_lift: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarehouseConfig {
    pub seed: u64,
    #[serde(default = "defaults::n_shops")]
    pub n_shops: u32,
    #[serde(default = "defaults::n_users")]
    pub n_users: u32,
    #[serde(default = "defaults::n_brands")]
    pub n_brands: u32,
    #[serde(default = "defaults::n_days")]
    pub n_days: u32,
    /// First generated day, `YYYYMMDD`.
    #[serde(default = "defaults::start_date")]
    pub start_date: String,
    #[serde(default)]
    pub base_rates: BaseRates,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

mod defaults {
    pub fn n_shops() -> u32 {
        40
    }
    pub fn n_users() -> u32 {
        6000
    }
    pub fn n_brands() -> u32 {
        8
    }
    pub fn n_days() -> u32 {
        60
    }
    pub fn start_date() -> String {
        "20250915".into()
    }
}

impl Default for WarehouseConfig {
    fn default() -> Self {
        Self::with_seed(42)
    }
}

impl WarehouseConfig {
    /// Desk-scale defaults: ~100k orders and ~300k sessions.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            n_shops: defaults::n_shops(),
            n_users: defaults::n_users(),
            n_brands: defaults::n_brands(),
            n_days: defaults::n_days(),
            start_date: defaults::start_date(),
            base_rates: BaseRates::default(),
            scenarios: Vec::new(),
        }
    }

    /// A small configuration for fast tests.
    pub fn small(seed: u64) -> Self {
        Self {
            n_shops: 6,
            n_users: 800,
            n_brands: 3,
            n_days: 28,
            ..Self::with_seed(seed)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, WarehouseError> {
        toml::from_str(text).map_err(|e| WarehouseError::Config(e.to_string()))
    }

    pub fn start(&self) -> Result<NaiveDate, WarehouseError> {
        parse_ds(&self.start_date).ok_or_else(|| WarehouseError::Config(format!("bad start_date `{}`", self.start_date)))
    }

    /// Inclusive `(first, last)` generated day.
    pub fn date_range(&self) -> Result<(NaiveDate, NaiveDate), WarehouseError> {
        let start = self.start()?;
        Ok((start, start + chrono::Days::new(u64::from(self.n_days.max(1)) - 1)))
    }

    pub fn validate(&self) -> Result<(), WarehouseError> {
        let bad = |m: &str| Err(WarehouseError::Config(m.to_string()));
        if self.n_shops == 0 || self.n_users == 0 || self.n_brands == 0 {
            return bad("n_shops, n_users and n_brands must be at least 1");
        }
        if self.n_days < 14 {
            return bad("n_days must be at least 14 so week-over-week comparisons have a prior week");
        }
        let r = &self.base_rates;
        if !(r.orders_per_shop_day > 0.0 && r.sessions_per_order > 0.0 && r.mean_basket > 0.0) {
            return bad("base rates must be positive");
        }
        for p in [r.coupon_prob, r.refund_prob, r.cancel_prob, r.review_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        let (first, last) = self.date_range()?;
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            if !ids.insert(s.scenario_id.as_str()) {
                return bad(&format!("duplicate scenario_id `{}`", s.scenario_id));
            }
            s.validate(first, last)?;
        }
        Ok(())
    }
}

pub fn parse_ds(ds: &str) -> Option<NaiveDate> {
    if ds.len() != 8 {
        return None;
    }
    NaiveDate::parse_from_str(ds, "%Y%m%d").ok()
}

pub fn format_ds(date: NaiveDate) -> String {
    date.format("%Y%m%d").to_string()
}

/// Read-only handle on a generated store. Connections are pooled; every
/// connection is opened read-only so queries cannot mutate the snapshot.
#[derive(Debug)]
pub struct WarehouseHandle {
    path: PathBuf,
    pool: Mutex<Vec<Connection>>,
}

impl WarehouseHandle {
    pub fn open(path: &Path) -> Result<Self, WarehouseError> {
        if !path.exists() {
            return Err(WarehouseError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("warehouse store `{}` not found", path.display()),
            )));
        }
        let handle = Self {
            path: path.to_path_buf(),
            pool: Mutex::new(Vec::new()),
        };
        let conn = handle.connect()?;
        handle.release(conn);
        Ok(handle)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn connect(&self) -> Result<Connection, WarehouseError> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
        )?;
        Ok(conn)
    }

    /// Checks a connection out of the pool (opening one if empty).
    pub fn acquire(&self) -> Result<Connection, WarehouseError> {
        if let Some(conn) = self.pool.lock().expect("pool lock").pop() {
            return Ok(conn);
        }
        self.connect()
    }

    pub fn release(&self, conn: Connection) {
        self.pool.lock().expect("pool lock").push(conn);
    }

    pub fn with_connection<T>(
        &self,
        f: impl FnOnce(&Connection) -> Result<T, WarehouseError>,
    ) -> Result<T, WarehouseError> {
        let conn = self.acquire()?;
        let out = f(&conn);
        self.release(conn);
        out
    }

    pub fn config(&self) -> Result<WarehouseConfig, WarehouseError> {
        self.with_connection(store::read_config)
    }

    pub fn ground_truth(&self, scenario_id: &str) -> Result<GroundTruth, WarehouseError> {
        self.with_connection(|c| store::read_ground_truth(c, scenario_id))
    }

    pub fn scenario(&self, scenario_id: &str) -> Result<Scenario, WarehouseError> {
        self.config()?
            .scenarios
            .into_iter()
            .find(|s| s.scenario_id == scenario_id)
            .ok_or_else(|| WarehouseError::UnknownScenario(scenario_id.to_string()))
    }

    /// Writes one CSV per table into `dir`, rows in primary-key order.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>, WarehouseError> {
        std::fs::create_dir_all(dir)?;
        self.with_connection(|c| store::export_tables(c, dir))
    }

    /// Runs an arbitrary read-only SQL statement and returns its rows as
    /// JSON values. Intended for tests and diagnostics.
    pub fn query_rows(&self, sql: &str) -> Result<Vec<Vec<serde_json::Value>>, WarehouseError> {
        self.with_connection(|c| store::query_rows(c, sql))
    }
}

/// Generates a warehouse into `path` (replacing any existing file) and
/// returns a read-only handle plus the ground truth of every scenario.
pub fn generate(config: &WarehouseConfig, path: &Path) -> Result<(WarehouseHandle, Vec<GroundTruth>), WarehouseError> {
    config.validate()?;
    let mut data = generate::generate_base(config)?;
    let mut truths = Vec::with_capacity(config.scenarios.len());
    for (i, s) in config.scenarios.iter().enumerate() {
        truths.push(scenario::apply(s, i as u64, config.seed, &mut data)?);
    }
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    {
        let mut conn = Connection::open(path)?;
        store::write_all(&mut conn, config, &data, &truths)?;
    }
    Ok((WarehouseHandle::open(path)?, truths))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_history() {
        let mut c = WarehouseConfig::small(1);
        c.n_days = 10;
        assert!(matches!(c.validate(), Err(WarehouseError::Config(_))));
    }

    #[test]
    fn rejects_zero_counts() {
        let mut c = WarehouseConfig::small(1);
        c.n_shops = 0;
        assert!(c.validate().is_err());
    }

    fn gmv_scenario() -> Scenario {
        Scenario {
            scenario_id: "s1".into(),
            effect: Effect::GmvDrop,
            target: Target {
                kind: TargetKind::Shop,
                value: "S002".into(),
            },
            window: ["20251006".into(), "20251012".into()],
            magnitude: 0.3,
            cause_label: "new users stopped ordering".into(),
        }
    }

    #[test]
    fn scenario_ground_truth_is_dominated() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = WarehouseConfig::small(5);
        c.scenarios.push(gmv_scenario());
        let (h, truths) = generate(&c, &dir.path().join("w.db")).unwrap();
        let t = &truths[0];
        t.check_invariants().unwrap();
        let top = t.top_cause().unwrap();
        assert_eq!((top.dimension.as_str(), top.segment.as_str()), ("userLevel", "new"));
        assert!((top.share_of_effect - 0.8).abs() < 1e-9);
        assert_eq!(&h.ground_truth("s1").unwrap(), t);
        assert_eq!(h.config().unwrap(), c);
    }

    #[test]
    fn ads_matches_dws() {
        let dir = tempfile::tempdir().unwrap();
        let (h, _) = generate(&WarehouseConfig::small(3), &dir.path().join("w.db")).unwrap();
        let a = h.query_rows("SELECT ROUND(SUM(net_gmv), 4), SUM(expose_cnt) FROM ads_brand").unwrap();
        let b = h.query_rows("SELECT ROUND(SUM(net_gmv), 4), (SELECT SUM(expose_cnt) FROM dws_log) FROM dws_trd").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn handle_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let (h, _) = generate(&WarehouseConfig::small(3), &dir.path().join("w.db")).unwrap();
        assert!(h.query_rows("DELETE FROM dim_shop").is_err());
    }

    #[test]
    fn oversized_magnitude_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = WarehouseConfig::small(5);
        let mut s = gmv_scenario();
        s.magnitude = 1.0;
        c.scenarios.push(s);
        assert!(matches!(generate(&c, &dir.path().join("w.db")), Err(WarehouseError::Scenario { .. })));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = WarehouseConfig::small(9);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(WarehouseConfig::from_toml_str(&text).unwrap(), c);
    }
}

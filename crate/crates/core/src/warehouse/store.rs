use std::path::{Path, PathBuf};

use chrono::Datelike;
use rusqlite::types::ValueRef;
use rusqlite::{params, Connection};

use super::generate::{is_holiday, is_weekend, WarehouseData};
use super::{GroundTruth, WarehouseConfig, WarehouseError};

pub const DWS_TABLES: [&str; 2] = ["dws_trd", "dws_log"];
pub const ADS_TABLES: [&str; 2] = ["ads_shop", "ads_brand"];
pub const ALL_TABLES: [&str; 7] = ["dws_trd", "dws_log", "dim_usr", "dim_shop", "dim_date", "ads_shop", "ads_brand"];

/// Additive order measures pre-aggregated into the ADS tables.
pub const ADS_TRD_SUMS: [&str; 15] = [
    "order_cnt",
    "net_gmv",
    "gross_gmv",
    "item_qty",
    "has_review",
    "is_bad_review",
    "rating",
    "is_refund",
    "refund_amt",
    "discount_amt",
    "subsidy_amt",
    "coupon_used",
    "delivery_minutes",
    "is_late",
    "is_cancel",
];
/// Additive traffic measures pre-aggregated into the ADS tables.
pub const ADS_LOG_SUMS: [&str; 6] = ["expose_cnt", "click_cnt", "cart_cnt", "pay_cnt", "search_cnt", "stay_seconds"];
/// Non-measure columns of `ads_shop`.
pub const ADS_SHOP_KEYS: [&str; 9] = [
    "ds",
    "shop_id",
    "shop_name",
    "brand_id",
    "brand_name",
    "category",
    "district",
    "city",
    "shop_tier",
];
/// Non-measure columns of `ads_brand`.
pub const ADS_BRAND_KEYS: [&str; 3] = ["ds", "brand_id", "brand_name"];

const SCHEMA: &str = "
CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE ground_truth (scenario_id TEXT PRIMARY KEY, body TEXT NOT NULL);
CREATE TABLE dim_date (
    ds TEXT PRIMARY KEY, is_week TEXT NOT NULL, is_holiday TEXT NOT NULL,
    day_of_week TEXT NOT NULL, month TEXT NOT NULL
);
CREATE TABLE dim_shop (
    shop_id TEXT PRIMARY KEY, shop_name TEXT NOT NULL, brand_id TEXT NOT NULL, brand_name TEXT NOT NULL,
    category TEXT NOT NULL, district TEXT NOT NULL, city TEXT NOT NULL, shop_tier TEXT NOT NULL
);
CREATE TABLE dim_usr (
    user_id TEXT PRIMARY KEY, gender TEXT NOT NULL, age_band TEXT NOT NULL,
    user_level TEXT NOT NULL, user_city TEXT NOT NULL
);
CREATE TABLE dws_trd (
    order_id TEXT PRIMARY KEY, ds TEXT NOT NULL, user_id TEXT NOT NULL, shop_id TEXT NOT NULL,
    order_channel TEXT NOT NULL, delivery_type TEXT NOT NULL, order_cnt INTEGER NOT NULL,
    net_gmv REAL NOT NULL, gross_gmv REAL NOT NULL, discount_amt REAL NOT NULL, subsidy_amt REAL NOT NULL,
    item_qty INTEGER NOT NULL, is_refund INTEGER NOT NULL, refund_amt REAL NOT NULL,
    delivery_minutes REAL NOT NULL, is_late INTEGER NOT NULL, coupon_used INTEGER NOT NULL,
    has_review INTEGER NOT NULL, rating INTEGER NOT NULL, is_bad_review INTEGER NOT NULL,
    is_cancel INTEGER NOT NULL
);
CREATE TABLE dws_log (
    log_id INTEGER PRIMARY KEY, ds TEXT NOT NULL, user_id TEXT NOT NULL, shop_id TEXT NOT NULL,
    traffic_source TEXT NOT NULL, expose_cnt INTEGER NOT NULL, click_cnt INTEGER NOT NULL,
    cart_cnt INTEGER NOT NULL, pay_cnt INTEGER NOT NULL, search_cnt INTEGER NOT NULL,
    stay_seconds INTEGER NOT NULL
);
";

const INDEXES: &str = "
CREATE INDEX idx_trd_shop_ds ON dws_trd (shop_id, ds);
CREATE INDEX idx_trd_ds ON dws_trd (ds);
CREATE INDEX idx_log_shop_ds ON dws_log (shop_id, ds);
CREATE INDEX idx_log_ds ON dws_log (ds);
CREATE INDEX idx_ads_shop ON ads_shop (shop_id, ds);
CREATE INDEX idx_ads_brand ON ads_brand (brand_id, ds);
";

fn ads_sql() -> String {
    let trd_sums: Vec<String> = ADS_TRD_SUMS.iter().map(|c| format!("SUM({c}) AS {c}")).collect();
    let log_sums: Vec<String> = ADS_LOG_SUMS.iter().map(|c| format!("SUM({c}) AS {c}")).collect();
    let zero_trd: Vec<String> = ADS_TRD_SUMS.iter().map(|c| format!("0 AS {c}")).collect();
    let zero_log: Vec<String> = ADS_LOG_SUMS.iter().map(|c| format!("0 AS {c}")).collect();
    let all: String = ADS_TRD_SUMS
        .iter()
        .chain(ADS_LOG_SUMS.iter())
        .map(|c| format!("SUM(x.{c}) AS {c}"))
        .collect::<Vec<_>>()
        .join(", ");
    let shop_attrs = "sh.shop_name, sh.brand_id, sh.brand_name, sh.category, sh.district, sh.city, sh.shop_tier";
    format!(
        "CREATE TABLE ads_shop AS
         SELECT x.ds AS ds, x.shop_id AS shop_id, {shop_attrs}, {all}
         FROM (
             SELECT ds, shop_id, {trd}, {zlog} FROM dws_trd GROUP BY ds, shop_id
             UNION ALL
             SELECT ds, shop_id, {ztrd}, {log} FROM dws_log GROUP BY ds, shop_id
         ) x JOIN dim_shop sh ON sh.shop_id = x.shop_id
         GROUP BY x.ds, x.shop_id
         ORDER BY x.shop_id, x.ds;
         CREATE TABLE ads_brand AS
         SELECT x.ds AS ds, x.brand_id AS brand_id, x.brand_name AS brand_name, {all}
         FROM ads_shop x
         GROUP BY x.ds, x.brand_id, x.brand_name
         ORDER BY x.brand_id, x.ds;",
        trd = trd_sums.join(", "),
        log = log_sums.join(", "),
        ztrd = zero_trd.join(", "),
        zlog = zero_log.join(", "),
    )
}

pub(crate) fn write_all(
    conn: &mut Connection,
    config: &WarehouseConfig,
    data: &WarehouseData,
    truths: &[GroundTruth],
) -> Result<(), WarehouseError> {
    conn.execute_batch("PRAGMA journal_mode = OFF; PRAGMA synchronous = OFF;")?;
    conn.execute_batch(SCHEMA)?;
    let tx = conn.transaction()?;
    {
        let cfg = serde_json::to_string(config).map_err(|e| WarehouseError::Config(e.to_string()))?;
        tx.execute("INSERT INTO meta (key, value) VALUES ('config', ?1)", params![cfg])?;
        let mut st = tx.prepare("INSERT INTO ground_truth (scenario_id, body) VALUES (?1, ?2)")?;
        for t in truths {
            let body = serde_json::to_string(t).map_err(|e| WarehouseError::Config(e.to_string()))?;
            st.execute(params![t.scenario_id, body])?;
        }

        let mut st = tx.prepare("INSERT INTO dim_date VALUES (?1, ?2, ?3, ?4, ?5)")?;
        for (i, d) in data.dates.iter().enumerate() {
            st.execute(params![
                data.ds(i),
                if is_weekend(*d) { "Weekend" } else { "Weekday" },
                if is_holiday(*d) { "Holiday" } else { "Workday" },
                d.format("%a").to_string(),
                format!("{:04}-{:02}", d.year(), d.month()),
            ])?;
        }

        let mut st = tx.prepare("INSERT INTO dim_shop VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)")?;
        for s in &data.shops {
            st.execute(params![s.id, s.name, s.brand_id, s.brand_name, s.category, s.district, s.city, s.tier])?;
        }

        let mut st = tx.prepare("INSERT INTO dim_usr VALUES (?1, ?2, ?3, ?4, ?5)")?;
        for u in &data.users {
            st.execute(params![u.id, u.gender, u.age_band, u.level, u.city])?;
        }

        let days: Vec<String> = (0..data.dates.len()).map(|i| data.ds(i)).collect();
        let mut st = tx.prepare(
            "INSERT INTO dws_trd VALUES (?1, ?2, ?3, ?4, ?5, ?6, 1, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18, ?19, ?20)",
        )?;
        for r in &data.trd {
            st.execute(params![
                r.order_id,
                days[r.day],
                data.users[r.user].id,
                data.shops[r.shop].id,
                r.order_channel,
                r.delivery_type,
                r.net_gmv,
                r.gross_gmv,
                r.discount_amt,
                r.subsidy_amt,
                r.item_qty,
                r.is_refund,
                r.refund_amt,
                r.delivery_minutes,
                r.is_late,
                r.coupon_used,
                r.has_review,
                r.rating,
                r.is_bad_review,
                r.is_cancel,
            ])?;
        }

        let mut st = tx.prepare("INSERT INTO dws_log VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)")?;
        for (i, r) in data.log.iter().enumerate() {
            st.execute(params![
                i as i64 + 1,
                days[r.day],
                data.users[r.user].id,
                data.shops[r.shop].id,
                r.traffic_source,
                r.expose_cnt,
                r.click_cnt,
                r.cart_cnt,
                r.pay_cnt,
                r.search_cnt,
                r.stay_seconds,
            ])?;
        }
    }
    tx.execute_batch(&ads_sql())?;
    tx.execute_batch(INDEXES)?;
    tx.commit()?;
    Ok(())
}

pub(crate) fn read_config(conn: &Connection) -> Result<WarehouseConfig, WarehouseError> {
    let text: String = conn.query_row("SELECT value FROM meta WHERE key = 'config'", [], |r| r.get(0))?;
    serde_json::from_str(&text).map_err(|e| WarehouseError::Config(e.to_string()))
}

pub(crate) fn read_ground_truth(conn: &Connection, scenario_id: &str) -> Result<GroundTruth, WarehouseError> {
    let body: Option<String> = conn
        .query_row(
            "SELECT body FROM ground_truth WHERE scenario_id = ?1",
            params![scenario_id],
            |r| r.get(0),
        )
        .map(Some)
        .or_else(|e| match e {
            rusqlite::Error::QueryReturnedNoRows => Ok(None),
            e => Err(e),
        })?;
    let body = body.ok_or_else(|| WarehouseError::UnknownScenario(scenario_id.to_string()))?;
    serde_json::from_str(&body).map_err(|e| WarehouseError::Config(e.to_string()))
}

fn order_by(table: &str) -> &'static str {
    match table {
        "dws_trd" => "order_id",
        "dws_log" => "log_id",
        "dim_usr" => "user_id",
        "dim_shop" => "shop_id",
        "dim_date" => "ds",
        "ads_shop" => "shop_id, ds",
        _ => "brand_id, ds",
    }
}

/// Converts one SQLite cell to JSON. Integral reals stay reals.
pub fn cell_to_json(v: ValueRef<'_>) -> serde_json::Value {
    match v {
        ValueRef::Null => serde_json::Value::Null,
        ValueRef::Integer(i) => serde_json::Value::from(i),
        ValueRef::Real(f) => serde_json::Number::from_f64(f)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null),
        ValueRef::Text(t) => serde_json::Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => serde_json::Value::String(format!("<{} bytes>", b.len())),
    }
}

fn cell_to_text(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => format!("<{} bytes>", b.len()),
    }
}

pub(crate) fn export_tables(conn: &Connection, dir: &Path) -> Result<Vec<PathBuf>, WarehouseError> {
    let mut written = Vec::new();
    for table in ALL_TABLES {
        let path = dir.join(format!("{table}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut st = conn.prepare(&format!("SELECT * FROM {table} ORDER BY {}", order_by(table)))?;
        let cols: Vec<String> = st.column_names().iter().map(|c| c.to_string()).collect();
        w.write_record(&cols)?;
        let mut rows = st.query([])?;
        while let Some(row) = rows.next()? {
            let rec: Vec<String> = (0..cols.len())
                .map(|i| row.get_ref(i).map(cell_to_text))
                .collect::<Result<_, _>>()?;
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn query_rows(conn: &Connection, sql: &str) -> Result<Vec<Vec<serde_json::Value>>, WarehouseError> {
    let mut st = conn.prepare(sql)?;
    let n = st.column_count();
    let mut rows = st.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        out.push((0..n).map(|i| row.get_ref(i).map(cell_to_json)).collect::<Result<_, _>>()?);
    }
    Ok(out)
}

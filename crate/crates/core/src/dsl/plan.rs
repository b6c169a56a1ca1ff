//! Routing and SQL synthesis for calibrated queries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrate::compare_suffixes;
use super::query::{Compare, Condition, DslQuery, FilterItem, FilterNode, OrderType, QueryRule, Relation, Scalar};
use super::DslError;
use crate::catalog::{Aggregation, Catalog, DimensionDef, Grain, MetricDef};
use crate::warehouse::{format_ds, parse_ds, ADS_BRAND_KEYS, ADS_LOG_SUMS, ADS_SHOP_KEYS, ADS_TRD_SUMS, DWS_TABLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "ADS")]
    Ads,
    #[serde(rename = "DWS")]
    Dws,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Ads => "ADS",
            Route::Dws => "DWS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSql {
    pub compare: Compare,
    pub ds: [String; 2],
    pub sql_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub route: Route,
    pub tables: Vec<String>,
    pub sql_text: String,
    pub cache_key: String,
    /// The calibrated query the plan was built from.
    pub query: DslQuery,
    /// Output columns of `sql_text`: dimensions, then metrics.
    pub columns: Vec<String>,
    pub compare: Vec<CompareSql>,
    /// Set when ordering involves compare columns, which only exist after
    /// the shifted windows are merged; `sql_text` then carries no LIMIT.
    pub post_sort: Option<Vec<(String, OrderType)>>,
}

/// Where a query's rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Fact(&'static str),
    Ads(&'static str),
}

fn fact_of(metric: &MetricDef, catalog: &Catalog) -> Option<&'static str> {
    let table = match &metric.aggregation {
        Aggregation::Ratio { numerator, .. } => catalog.metric(numerator)?.physical_source()?.0,
        _ => metric.physical_source()?.0,
    };
    DWS_TABLES.iter().copied().find(|t| *t == table)
}

fn ads_column(column: &str) -> bool {
    ADS_TRD_SUMS.contains(&column) || ADS_LOG_SUMS.contains(&column)
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn quote_text(text: &str) -> String {
    format!("'{}'", text.replace('\'', "''"))
}

fn literal(s: &Scalar) -> String {
    match s {
        Scalar::Int(i) => i.to_string(),
        Scalar::Float(x) => format!("{x:?}"),
        Scalar::Text(t) => quote_text(t),
    }
}

struct Builder<'a> {
    catalog: &'a Catalog,
    source: Source,
    joins: BTreeSet<&'static str>,
}

impl Builder<'_> {
    fn metric_expr(&self, m: &MetricDef) -> Result<String, DslError> {
        match &m.aggregation {
            Aggregation::Ratio { numerator, denominator } => {
                let num = self.catalog.metric(numerator).ok_or_else(|| unroutable(&m.canonical_name))?;
                let den = self.catalog.metric(denominator).ok_or_else(|| unroutable(&m.canonical_name))?;
                Ok(format!(
                    "CAST({} AS REAL) / NULLIF({}, 0)",
                    self.metric_expr(num)?,
                    self.metric_expr(den)?
                ))
            }
            agg => {
                let (_, col) = m.physical_source().ok_or_else(|| unroutable(&m.canonical_name))?;
                match (self.source, agg) {
                    (Source::Fact(_), Aggregation::Sum) => Ok(format!("SUM(f.{col})")),
                    (Source::Fact(_), _) => Ok(format!("COUNT(DISTINCT f.{col})")),
                    (Source::Ads(_), Aggregation::Sum) if ads_column(col) => Ok(format!("SUM(a.{col})")),
                    (Source::Ads(t), _) => Err(DslError::Plan(format!(
                        "metric '{}' is not pre-aggregated on {t}",
                        m.canonical_name
                    ))),
                }
            }
        }
    }

    fn dimension_expr(&mut self, d: &DimensionDef) -> Result<String, DslError> {
        let col = d.column();
        match self.source {
            Source::Ads(t) => {
                let keys: &[&str] = if t == "ads_shop" { &ADS_SHOP_KEYS } else { &ADS_BRAND_KEYS };
                if keys.contains(&col.as_str()) {
                    Ok(format!("a.{col}"))
                } else {
                    Err(DslError::Plan(format!("dimension '{}' is not available on {t}", d.canonical_name)))
                }
            }
            Source::Fact(fact) => match d.source_table.as_str() {
                "dim_date" if col == "ds" => Ok("f.ds".into()),
                "dim_date" => {
                    self.joins.insert("dim_date");
                    Ok(format!("dd.{col}"))
                }
                "dim_shop" if col == "shop_id" => Ok("f.shop_id".into()),
                "dim_shop" => {
                    self.joins.insert("dim_shop");
                    Ok(format!("sh.{col}"))
                }
                "dim_usr" => {
                    self.joins.insert("dim_usr");
                    Ok(format!("u.{col}"))
                }
                t if t == fact => Ok(format!("f.{col}")),
                t => Err(DslError::Plan(format!(
                    "dimension '{}' lives on {t} and cannot be joined to {fact}",
                    d.canonical_name
                ))),
            },
        }
    }

    fn condition_sql(&mut self, c: &Condition) -> Result<String, DslError> {
        let d = self
            .catalog
            .dimension(&c.column)
            .ok_or_else(|| DslError::Plan(format!("unknown filter column '{}'", c.column)))?;
        let col = self.dimension_expr(d)?;
        let p: Vec<String> = c.params.iter().map(literal).collect();
        Ok(match c.rule {
            QueryRule::In => format!("{col} IN ({})", p.join(", ")),
            QueryRule::Eq => format!("{col} = {}", p[0]),
            QueryRule::Neq => format!("{col} <> {}", p[0]),
            QueryRule::Gt => format!("{col} > {}", p[0]),
            QueryRule::Lt => format!("{col} < {}", p[0]),
            QueryRule::Between => format!("{col} BETWEEN {} AND {}", p[0], p[1]),
        })
    }

    fn filter_sql(&mut self, node: &FilterNode) -> Result<String, DslError> {
        let glue = match node.relation {
            Relation::And => " AND ",
            Relation::Or => " OR ",
        };
        let parts = node
            .conditions
            .iter()
            .map(|item| match item {
                FilterItem::Condition(c) => self.condition_sql(c),
                FilterItem::Node(n) => self.filter_sql(n),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(format!("({})", parts.join(glue)))
    }
}

fn unroutable(metric: &str) -> DslError {
    DslError::Plan(format!("metric '{metric}' has no physical mounting"))
}

struct Parts {
    select: Vec<String>,
    from: String,
    where_: String,
    group_by: Vec<String>,
    tables: Vec<String>,
}

fn build_parts(q: &DslQuery, catalog: &Catalog, source: Source, ds: &[String; 2]) -> Result<Parts, DslError> {
    let mut b = Builder {
        catalog,
        source,
        joins: BTreeSet::new(),
    };
    let mut select = Vec::new();
    let mut group_by = Vec::new();
    for name in &q.dimension {
        let d = catalog
            .dimension(name)
            .ok_or_else(|| DslError::Plan(format!("unknown dimension '{name}'")))?;
        let e = b.dimension_expr(d)?;
        select.push(format!("{e} AS {}", quote_ident(name)));
        group_by.push(e);
    }
    for name in &q.metric {
        let m = catalog.metric(name).ok_or_else(|| DslError::Plan(format!("unknown metric '{name}'")))?;
        select.push(format!("{} AS {}", b.metric_expr(m)?, quote_ident(name)));
    }
    let alias = match source {
        Source::Fact(_) => "f",
        Source::Ads(_) => "a",
    };
    let mut where_ = format!("{alias}.ds BETWEEN {} AND {}", quote_text(&ds[0]), quote_text(&ds[1]));
    if let Some(f) = &q.filter {
        where_.push_str(" AND ");
        where_.push_str(&b.filter_sql(f)?);
    }
    let (from, mut tables) = match source {
        Source::Ads(t) => (format!("{t} a"), vec![t.to_string()]),
        Source::Fact(t) => {
            let mut from = format!("{t} f");
            for j in &b.joins {
                from.push_str(match *j {
                    "dim_date" => "\nJOIN dim_date dd ON dd.ds = f.ds",
                    "dim_shop" => "\nJOIN dim_shop sh ON sh.shop_id = f.shop_id",
                    _ => "\nJOIN dim_usr u ON u.user_id = f.user_id",
                });
            }
            (from, vec![t.to_string()])
        }
    };
    tables.extend(b.joins.iter().map(|s| s.to_string()));
    Ok(Parts {
        select,
        from,
        where_,
        group_by,
        tables,
    })
}

fn assemble(parts: &Parts, order: Option<&[(String, OrderType)]>, limit: Option<u64>) -> String {
    let mut sql = format!(
        "SELECT {}\nFROM {}\nWHERE {}",
        parts.select.join(", "),
        parts.from,
        parts.where_
    );
    if !parts.group_by.is_empty() {
        sql.push_str(&format!("\nGROUP BY {}", parts.group_by.join(", ")));
    }
    if let Some(order) = order.filter(|o| !o.is_empty()) {
        let items: Vec<String> = order
            .iter()
            .map(|(c, o)| {
                let dir = match o {
                    OrderType::Asc => "ASC",
                    OrderType::Desc => "DESC",
                };
                format!("{} {dir}", quote_ident(c))
            })
            .collect();
        sql.push_str(&format!("\nORDER BY {}", items.join(", ")));
    }
    if let Some(n) = limit {
        sql.push_str(&format!("\nLIMIT {n}"));
    }
    sql
}

/// Full ordering: explicit `orderBy` (or the default of first dimension
/// ascending, first metric descending), then every dimension ascending as a
/// tiebreaker.
fn effective_order(q: &DslQuery) -> Vec<(String, OrderType)> {
    let mut order: Vec<(String, OrderType)> = if q.order_by.is_empty() {
        let mut o = Vec::new();
        if let Some(d) = q.dimension.first() {
            o.push((d.clone(), OrderType::Asc));
        }
        if let Some(m) = q.metric.first() {
            o.push((m.clone(), OrderType::Desc));
        }
        o
    } else {
        q.order_by.iter().map(|o| (o.column.clone(), o.order)).collect()
    };
    for d in &q.dimension {
        if !order.iter().any(|(c, _)| c == d) {
            order.push((d.clone(), OrderType::Asc));
        }
    }
    order
}

fn shifted(ds: &[String; 2], days: u64) -> Result<[String; 2], DslError> {
    let shift = |s: &str| {
        parse_ds(s)
            .map(|d| format_ds(d - chrono::Days::new(days)))
            .ok_or_else(|| DslError::Plan(format!("bad date '{s}'")))
    };
    Ok([shift(&ds[0])?, shift(&ds[1])?])
}

fn ads_table_for(q: &DslQuery, catalog: &Catalog) -> Option<&'static str> {
    let metrics: Vec<&MetricDef> = q.metric.iter().filter_map(|m| catalog.metric(m)).collect();
    if metrics.len() != q.metric.len() || metrics.iter().any(|m| !m.ads_available) {
        return None;
    }
    let mut columns: Vec<String> = Vec::new();
    for name in q.dimension.iter().chain(q.filter.iter().flat_map(|f| f.leaves()).map(|c| &c.column)) {
        columns.push(catalog.dimension(name)?.column());
    }
    for (table, keys, grain) in [
        ("ads_brand", &ADS_BRAND_KEYS[..], Grain::Brand),
        ("ads_shop", &ADS_SHOP_KEYS[..], Grain::Shop),
    ] {
        let dims_ok = columns.iter().all(|c| keys.contains(&c.as_str()));
        let metrics_ok = metrics.iter().all(|m| m.grains.contains(&grain));
        if dims_ok && metrics_ok {
            return Some(table);
        }
    }
    None
}

fn cache_key(q: &DslQuery, route: Route) -> String {
    let mut h = Sha256::new();
    h.update(q.to_json().as_bytes());
    h.update(b"\n");
    h.update(route.as_str().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Routes a calibrated query and synthesizes its SQL. Prefers the ADS
/// tables when every metric and dimension is available there.
pub fn plan(query: &DslQuery, catalog: &Catalog) -> Result<QueryPlan, DslError> {
    plan_inner(query, catalog, None)
}

/// Like [`plan`] with the route fixed. Fails when the query cannot be
/// answered from the requested layer.
pub fn plan_with_route(query: &DslQuery, catalog: &Catalog, route: Route) -> Result<QueryPlan, DslError> {
    plan_inner(query, catalog, Some(route))
}

fn plan_inner(q: &DslQuery, catalog: &Catalog, forced: Option<Route>) -> Result<QueryPlan, DslError> {
    let mut facts = BTreeSet::new();
    for name in &q.metric {
        let m = catalog.metric(name).ok_or_else(|| DslError::Plan(format!("unknown metric '{name}'")))?;
        facts.insert(fact_of(m, catalog).ok_or_else(|| unroutable(name))?);
    }
    if facts.len() > 1 {
        return Err(DslError::Plan(format!(
            "metrics span {}; query each fact table separately",
            facts.into_iter().collect::<Vec<_>>().join(" and ")
        )));
    }
    let fact = facts.into_iter().next().ok_or_else(|| DslError::Plan("no metrics".into()))?;

    let ads = ads_table_for(q, catalog);
    let source = match (forced, ads) {
        (Some(Route::Dws), _) | (None, None) => Source::Fact(fact),
        (Some(Route::Ads), Some(t)) | (None, Some(t)) => Source::Ads(t),
        (Some(Route::Ads), None) => {
            return Err(DslError::Plan("query is not answerable from the ADS layer".into()));
        }
    };
    let route = match source {
        Source::Ads(_) => Route::Ads,
        Source::Fact(_) => Route::Dws,
    };

    let mut columns: Vec<String> = q.dimension.clone();
    columns.extend(q.metric.iter().cloned());
    let order = effective_order(q);
    let mut needs_post_sort = false;
    for (c, _) in &order {
        if columns.contains(c) {
            continue;
        }
        let derived = compare_suffixes().iter().find_map(|s| {
            let base = c.strip_suffix(s.as_str())?;
            let cmp = s.trim_start_matches('_').split('_').next()?;
            let requested = q.compare.iter().any(|k| k.as_str() == cmp);
            (q.metric.iter().any(|m| m == base) && requested).then_some(())
        });
        if derived.is_none() {
            return Err(DslError::Plan(format!("orderBy column '{c}' is not part of the result")));
        }
        needs_post_sort = true;
    }

    let parts = build_parts(q, catalog, source, &q.ds)?;
    let sql_text = if needs_post_sort {
        assemble(&parts, None, None)
    } else {
        assemble(&parts, Some(&order), Some(q.limit))
    };
    let mut compare = Vec::new();
    for c in &q.compare {
        let ds = shifted(&q.ds, c.shift_days())?;
        let p = build_parts(q, catalog, source, &ds)?;
        compare.push(CompareSql {
            compare: *c,
            sql_text: assemble(&p, None, None),
            ds,
        });
    }
    Ok(QueryPlan {
        route,
        tables: parts.tables,
        sql_text,
        cache_key: cache_key(q, route),
        query: q.clone(),
        columns,
        compare,
        post_sort: needs_post_sort.then_some(order),
    })
}

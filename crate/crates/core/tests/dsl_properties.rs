mod common;

use std::sync::OnceLock;

use aida_core::catalog::{Catalog, NameKind, ResolutionStatus};
use aida_core::dsl::{
    calibrate, plan, Compare, Condition, DslQuery, FilterItem, FilterNode, OrderBy, OrderType, QueryRule, Relation,
    Route, Scalar, Status,
};
use common::{build, small_config, Built};
use proptest::prelude::*;

fn catalog() -> &'static Catalog {
    static C: OnceLock<Catalog> = OnceLock::new();
    C.get_or_init(Catalog::default_catalog)
}

fn small() -> &'static Built {
    static W: OnceLock<Built> = OnceLock::new();
    W.get_or_init(|| build(&small_config()))
}

/// Names a model might write: canonical names, aliases, case variants and
/// strangers.
fn any_name() -> impl Strategy<Value = String> {
    let cat = catalog();
    let mut pool: Vec<String> = cat.metrics().iter().map(|m| m.canonical_name.clone()).collect();
    pool.extend(cat.dimensions().iter().map(|d| d.canonical_name.clone()));
    pool.extend(cat.aliases().iter().map(|a| a.alias.clone()));
    prop_oneof![
        4 => proptest::sample::select(pool.clone()),
        1 => proptest::sample::select(pool).prop_map(|s| s.to_uppercase()),
        1 => "[a-z][a-z_]{0,10}",
    ]
}

fn date() -> impl Strategy<Value = String> {
    (2025u32..2026, 1u32..13, 1u32..29).prop_map(|(y, m, d)| format!("{y}{m:02}{d:02}"))
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        any::<i32>().prop_map(|i| Scalar::Int(i as i64)),
        (-1e6f64..1e6).prop_map(|x| Scalar::Float(x + 0.5)),
        "[A-Za-z0-9]{1,6}".prop_map(Scalar::Text),
    ]
}

fn condition() -> impl Strategy<Value = Condition> {
    let rules = prop_oneof![
        Just(QueryRule::In),
        Just(QueryRule::Eq),
        Just(QueryRule::Neq),
        Just(QueryRule::Gt),
        Just(QueryRule::Lt),
        Just(QueryRule::Between),
    ];
    (any_name(), rules, proptest::collection::vec(scalar(), 1..4)).prop_map(|(column, rule, mut params)| {
        match rule {
            QueryRule::In => {}
            QueryRule::Between => {
                params.resize(2, Scalar::Int(0));
            }
            _ => params.truncate(1),
        }
        Condition { column, rule, params }
    })
}

fn relation() -> impl Strategy<Value = Relation> {
    prop_oneof![Just(Relation::And), Just(Relation::Or)]
}

fn leaves() -> impl Strategy<Value = Vec<FilterItem>> {
    proptest::collection::vec(condition().prop_map(FilterItem::Condition), 1..3)
}

fn filter() -> impl Strategy<Value = FilterNode> {
    (relation(), leaves(), proptest::option::of((relation(), leaves()))).prop_map(|(relation, mut items, nested)| {
        if let Some((r, inner)) = nested {
            items.push(FilterItem::Node(FilterNode {
                relation: r,
                conditions: inner,
            }));
        }
        FilterNode {
            relation,
            conditions: items,
        }
    })
}

fn query() -> impl Strategy<Value = DslQuery> {
    (
        proptest::collection::vec(any_name(), 1..4),
        proptest::collection::vec(any_name(), 0..3),
        proptest::option::of(filter()),
        date(),
        date(),
        proptest::collection::vec((any_name(), any::<bool>()), 0..2),
        1u64..500,
        proptest::sample::subsequence(vec![Compare::Wow, Compare::Yoy], 0..=2),
        proptest::option::of("[a-z]{1,8}\\.csv"),
    )
        .prop_map(|(metric, dimension, filter, a, b, order, limit, compare, save)| {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            DslQuery {
                metric,
                dimension,
                filter,
                ds: [a, b],
                order_by: order
                    .into_iter()
                    .map(|(column, asc)| OrderBy {
                        column,
                        order: if asc { OrderType::Asc } else { OrderType::Desc },
                    })
                    .collect(),
                limit,
                compare,
                save_data_path: save,
            }
        })
}

#[test]
fn canonical_names_resolve_to_themselves() {
    let cat = catalog();
    for m in cat.metrics() {
        let r = cat.resolve_name(&m.canonical_name, NameKind::Metric);
        assert_eq!((r.canonical_name.as_str(), r.status), (m.canonical_name.as_str(), ResolutionStatus::Exact));
    }
    for d in cat.dimensions() {
        let r = cat.resolve_name(&d.canonical_name, NameKind::Dimension);
        assert_eq!((r.canonical_name.as_str(), r.status), (d.canonical_name.as_str(), ResolutionStatus::Exact));
    }
    assert!(cat.check_compatibility(&[], &[]).is_empty());
    let filled = Catalog::default_catalog().with_filler(120, 60);
    assert!(filled.check_compatibility(&[], &[]).is_empty());
}

#[test]
fn every_alias_points_into_the_catalog() {
    let cat = catalog();
    for a in cat.aliases() {
        let r = cat.resolve_name(&a.alias, a.kind);
        assert!(
            cat.metric(&r.canonical_name).is_some() || cat.dimension(&r.canonical_name).is_some(),
            "alias {} resolves to unknown {}",
            a.alias,
            r.canonical_name
        );
    }
}

/// Splits a select list at commas outside parentheses.
fn top_level_items(list: &str) -> Vec<String> {
    let (mut out, mut cur, mut depth) = (Vec::new(), String::new(), 0);
    for c in list.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur.trim().to_string());
    out
}

proptest! {
    #[test]
    fn resolution_is_idempotent(token in any_name(), metric in any::<bool>()) {
        let kind = if metric { NameKind::Metric } else { NameKind::Dimension };
        let cat = catalog();
        let first = cat.resolve_name(&token, kind);
        let second = cat.resolve_name(&first.canonical_name, kind);
        prop_assert_eq!(&second.canonical_name, &first.canonical_name);
        if first.status != ResolutionStatus::Unknown {
            prop_assert_eq!(second.status, ResolutionStatus::Exact);
        }
    }

    #[test]
    fn requests_round_trip(q in query()) {
        let back = DslQuery::parse(&q.to_json()).unwrap();
        prop_assert_eq!(back, q);
    }

    #[test]
    fn calibration_is_idempotent(q in query()) {
        let (fixed, _) = calibrate(&q, catalog());
        let (again, report) = calibrate(&fixed, catalog());
        prop_assert!(report.notices.is_empty(), "{:?}", report.notices);
        prop_assert_eq!(again, fixed);
    }

    #[test]
    fn sql_shape(
        metrics in proptest::sample::subsequence(
            vec!["netGMV", "orderCnt", "netAov", "avgOrderValue", "refundRate", "buyerCnt"], 1..4),
        dims in proptest::sample::subsequence(vec!["gender", "isWeek", "shopId", "orderChannel"], 0..3),
    ) {
        let q = DslQuery::new(&metrics, ("20251001", "20251007")).with_dimensions(&dims);
        let p = plan(&q, catalog()).unwrap();
        let sql = &p.sql_text;
        let select = &sql[..sql.find("\nFROM").unwrap()];
        if dims.is_empty() {
            prop_assert!(!sql.contains("GROUP BY"));
        } else {
            prop_assert_eq!(sql.matches("GROUP BY").count(), 1);
            let line = sql.lines().find(|l| l.starts_with("GROUP BY")).unwrap();
            prop_assert_eq!(line.trim_start_matches("GROUP BY ").split(", ").count(), dims.len());
        }
        for m in &metrics {
            let alias = format!("AS \"{m}\"");
            prop_assert_eq!(select.matches(&alias).count(), 1, "{}", select);
            let items = top_level_items(select.trim_start_matches("SELECT "));
            let item = items.iter().find(|i| i.ends_with(&alias)).unwrap();
            prop_assert!(item.contains("SUM(") || item.contains("COUNT("), "{}", item);
            let ratio = matches!(
                catalog().metric(m).unwrap().aggregation,
                aida_core::catalog::Aggregation::Ratio { .. }
            );
            prop_assert_eq!(item.contains(" / "), ratio, "{}", item);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ads_and_dws_routes_agree(
        metrics in proptest::sample::subsequence(
            vec!["netGMV", "orderCnt", "refundRate", "avgOrderValue", "lateRate", "discountAmt"], 1..3),
        dim in proptest::sample::select(vec!["shopId", "brandId", "district", "shopTier", "ds"]),
        start in 0u32..20,
        len in 0u32..8,
    ) {
        let day = |n: u32| {
            let d = chrono::NaiveDate::from_ymd_opt(2025, 9, 15).unwrap() + chrono::Days::new(n as u64);
            d.format("%Y%m%d").to_string()
        };
        let (a, b) = (day(start), day(start + len));
        let q = DslQuery::new(&metrics, (&a, &b)).with_dimensions(&[dim]);
        let engine = small().engine();
        let ads = engine.run_forced(&q, Route::Ads);
        let dws = engine.run_forced(&q, Route::Dws);
        prop_assert_eq!(ads.package.status, Status::Success);
        prop_assert_eq!(ads.result, dws.result);
    }
}

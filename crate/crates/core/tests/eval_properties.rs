mod common;

use std::path::Path;

use aida_core::catalog::{Catalog, ViolationKind};
use aida_core::episode::{run_episode, EpisodeConfig, EpisodeLog, PolicyConfig};
use aida_core::eval::{
    exploration_profile, filter_trajectories, insight_score, query_touches, score_at, score_trajectory, JudgedInsight,
    QueryTouch, Trajectory, DEFAULT_ALPHA,
};
use aida_core::state::InsightStatus;
use aida_core::step::SandboxConfig;
use common::{build, fixture, small_config, Built};
use proptest::prelude::*;

fn judged() -> impl Strategy<Value = JudgedInsight> {
    (
        proptest::sample::select(vec!["a", "b", "c", "d"]),
        proptest::sample::select(vec![InsightStatus::New, InsightStatus::Reinforced, InsightStatus::Refuted]),
        proptest::option::weighted(0.95, any::<bool>()),
        0usize..4,
    )
        .prop_map(|(t, status, valid, hallucinated)| JudgedInsight {
            title: t.into(),
            status,
            valid,
            hallucinated,
        })
}

fn steps() -> impl Strategy<Value = Vec<Vec<JudgedInsight>>> {
    proptest::collection::vec(proptest::collection::vec(judged(), 0..3), 1..8)
}

fn touch() -> impl Strategy<Value = Option<QueryTouch>> {
    proptest::option::of((
        proptest::sample::subsequence(vec!["netGMV", "orderCnt", "exposeCnt", "refundRate"], 1..3),
        proptest::sample::subsequence(vec!["shopId", "gender", "ds", "userCity"], 0..3),
        any::<bool>(),
    ))
    .prop_map(|t| {
        t.map(|(m, d, bad)| QueryTouch {
            metrics: m.into_iter().map(str::to_string).collect(),
            dimensions: d.into_iter().map(str::to_string).collect(),
            violations: if bad { vec![ViolationKind::UnknownMetric] } else { Vec::new() },
        })
    })
}

proptest! {
    #[test]
    fn incremental_score_matches_recomputation(steps in steps(), alpha in 0.0f64..2.0) {
        let full = score_trajectory(&steps, alpha);
        let missing = steps.iter().flatten().any(|j| j.valid.is_none());
        prop_assert_eq!(full.is_err(), missing);
        if let Ok(report) = full {
            prop_assert_eq!(report.steps.len(), steps.len());
            for (t, row) in report.steps.iter().enumerate() {
                let scratch = score_at(&steps, alpha, t).unwrap();
                prop_assert!((row.score - scratch).abs() < 1e-9, "step {}: {} vs {}", t, row.score, scratch);
            }
            for (_, _, s) in &report.insights {
                prop_assert!(*s == -1.0 || (0.0..=1.0).contains(s));
            }
        }
    }

    #[test]
    fn repeated_queries_add_no_exploration(steps in proptest::collection::vec(touch(), 0..10)) {
        let cat = Catalog::default_catalog();
        let once = exploration_profile(&steps, &cat);
        let twice: Vec<Option<QueryTouch>> = steps
            .iter()
            .flat_map(|s| [s.clone(), s.clone().filter(|q| q.violations.is_empty())])
            .collect();
        let again = exploration_profile(&twice, &cat);
        prop_assert_eq!(&again.per_theme, &once.per_theme);
        prop_assert_eq!(again.violations_cumulative.last(), once.violations_cumulative.last());
        prop_assert!(once.violations_cumulative.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1));
        let pairs: usize = once.per_theme.values().sum();
        let accepted: std::collections::BTreeSet<(String, String)> = steps
            .iter()
            .flatten()
            .filter(|q| q.violations.is_empty())
            .flat_map(|q| q.metrics.iter().flat_map(move |m| q.dimensions.iter().map(move |d| (m.clone(), d.clone()))))
            .collect();
        prop_assert_eq!(pairs, accepted.len());
    }

    #[test]
    fn filtering_is_idempotent(data in proptest::collection::vec(steps(), 0..6)) {
        let dataset: Vec<Trajectory> = data
            .into_iter()
            .enumerate()
            .map(|(i, steps)| Trajectory { name: format!("t{i}"), steps })
            .collect();
        let (kept, report) = filter_trajectories(dataset.clone());
        prop_assert_eq!(report.total, dataset.len());
        prop_assert_eq!(report.kept + report.dropped.len(), report.total);
        for t in &kept {
            prop_assert!(t.steps.iter().flatten().all(|j| j.hallucinated == 0 && j.valid != Some(false)));
        }
        let (again, second) = filter_trajectories(kept.clone());
        prop_assert_eq!(&again, &kept);
        prop_assert!(second.dropped.is_empty());
        let share: f64 = report.status_proportions.values().sum();
        prop_assert!(share == 0.0 || (share - 1.0).abs() < 1e-9);
    }
}

#[test]
fn score_values() {
    assert_eq!(insight_score(true, 0, DEFAULT_ALPHA), 1.0);
    assert_eq!(insight_score(true, 1, DEFAULT_ALPHA), 0.5);
    assert_eq!(insight_score(true, 3, DEFAULT_ALPHA), 0.0);
    assert_eq!(insight_score(false, 0, DEFAULT_ALPHA), -1.0);
}

fn replay(w: &Built, name: &str, out: &Path) -> EpisodeLog {
    let mut cfg = EpisodeConfig::new(&w.path, PolicyConfig::Replay { file: fixture(name) });
    cfg.scenario_id = Some("s1".into());
    cfg.id.insert("shop".into(), "S002".into());
    run_episode(&cfg, out, SandboxConfig::default()).expect("episode runs");
    EpisodeLog::load(out).expect("log loads")
}

#[test]
fn replayed_fixtures_score_and_filter() {
    let w = build(&small_config());
    let clean = replay(&w, "replay_explorer.jsonl", &w.dir.path().join("clean"));
    let dirty = replay(&w, "replay_violations.jsonl", &w.dir.path().join("dirty"));

    let a = Trajectory::from_log(&clean);
    let b = Trajectory::from_log(&dirty);
    let report = score_trajectory(&a.steps, DEFAULT_ALPHA).unwrap();
    assert!(report.steps.last().unwrap().score >= 1.0, "{report:?}");
    let bad = score_trajectory(&b.steps, DEFAULT_ALPHA).unwrap();
    assert!(bad.steps.iter().map(|r| r.hallucination_count).sum::<usize>() >= 1);

    let (kept, f) = filter_trajectories(vec![a.clone(), b]);
    assert_eq!(kept, vec![a]);
    assert_eq!(f.dropped.len(), 1);
    assert_eq!(f.dropped[0].0, "dirty");

    let cat = Catalog::default_catalog();
    let profile = exploration_profile(&query_touches(&dirty), &cat);
    assert_eq!(profile.violations_cumulative, vec![0, 1, 2, 2]);
    // The one accepted query there filters on a shop without grouping.
    assert_eq!(profile.per_theme.values().sum::<usize>(), 0);
    let explored = exploration_profile(&query_touches(&clean), &cat);
    assert!(explored.per_theme.values().sum::<usize>() >= 1);
    assert_eq!(explored.violations_cumulative.last(), Some(&0));
}

//! Trajectory scoring, exploration breadth, violation counts and dataset
//! filtering over episode logs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ViolationKind};
use crate::episode::EpisodeLog;
use crate::state::InsightStatus;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("insight `{title}` at step {step} has no verdict")]
    MissingVerdict { step: usize, title: String },
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedInsight {
    pub title: String,
    pub status: InsightStatus,
    /// `None` when the judge did not answer.
    pub valid: Option<bool>,
    pub hallucinated: usize,
}

/// `max(0, 1 - alpha * H)` when valid, `-1` otherwise.
pub fn insight_score(valid: bool, hallucinated: usize, alpha: f64) -> f64 {
    if valid {
        (1.0 - alpha * hallucinated as f64).max(0.0)
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScoreRow {
    pub step: usize,
    /// Sum over the insight set as of this step; a re-judged title counts
    /// once, with its latest verdict.
    pub score: f64,
    pub valid_count: usize,
    pub invalid_count: usize,
    pub hallucination_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub alpha: f64,
    pub steps: Vec<StepScoreRow>,
    /// `(step, title, s)` for every judgement.
    pub insights: Vec<(usize, String, f64)>,
}

/// Scores a trajectory incrementally.
pub fn score_trajectory(steps: &[Vec<JudgedInsight>], alpha: f64) -> Result<ScoreReport, EvalError> {
    let mut current: BTreeMap<&str, f64> = BTreeMap::new();
    let mut running = 0.0;
    let mut report = ScoreReport {
        alpha,
        steps: Vec::with_capacity(steps.len()),
        insights: Vec::new(),
    };
    for (t, judged) in steps.iter().enumerate() {
        let mut row = StepScoreRow {
            step: t,
            score: 0.0,
            valid_count: 0,
            invalid_count: 0,
            hallucination_count: 0,
        };
        for j in judged {
            let valid = j.valid.ok_or_else(|| EvalError::MissingVerdict {
                step: t,
                title: j.title.clone(),
            })?;
            let s = insight_score(valid, j.hallucinated, alpha);
            running += s - current.insert(&j.title, s).unwrap_or(0.0);
            report.insights.push((t, j.title.clone(), s));
            if valid {
                row.valid_count += 1;
            } else {
                row.invalid_count += 1;
            }
            row.hallucination_count += j.hallucinated;
        }
        row.score = running;
        report.steps.push(row);
    }
    Ok(report)
}

/// Score after step `t`, recomputed from the start.
pub fn score_at(steps: &[Vec<JudgedInsight>], alpha: f64, t: usize) -> Result<f64, EvalError> {
    let mut latest: BTreeMap<&str, f64> = BTreeMap::new();
    for (i, judged) in steps.iter().enumerate().take(t + 1) {
        for j in judged {
            let valid = j.valid.ok_or_else(|| EvalError::MissingVerdict {
                step: i,
                title: j.title.clone(),
            })?;
            latest.insert(&j.title, insight_score(valid, j.hallucinated, alpha));
        }
    }
    Ok(latest.values().sum())
}

/// A trajectory reduced to what scoring and filtering need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    pub steps: Vec<Vec<JudgedInsight>>,
}

impl Trajectory {
    pub fn from_log(log: &EpisodeLog) -> Self {
        let name = log
            .dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let steps = log
            .steps
            .iter()
            .map(|r| match &r.reward_detail {
                Some(d) if !d.gain.judge_failed => d
                    .gain
                    .details
                    .iter()
                    .map(|j| JudgedInsight {
                        title: j.title.clone(),
                        status: j.status,
                        valid: Some(j.valid),
                        hallucinated: j.hallucinated,
                    })
                    .collect(),
                _ => r
                    .parsed
                    .incremental_insights()
                    .into_iter()
                    .map(|d| JudgedInsight {
                        title: d.title,
                        status: d.status,
                        valid: None,
                        hallucinated: 0,
                    })
                    .collect(),
            })
            .collect();
        Self { name, steps }
    }

    fn dirty_reason(&self) -> Option<String> {
        for (t, judged) in self.steps.iter().enumerate() {
            for j in judged {
                if j.hallucinated > 0 {
                    return Some(format!("step {t}: `{}` cites {} ungrounded numeral(s)", j.title, j.hallucinated));
                }
                if j.valid == Some(false) {
                    return Some(format!("step {t}: `{}` judged invalid", j.title));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub dropped: Vec<(String, String)>,
    /// Incremental insights per status among kept trajectories.
    pub status_counts: BTreeMap<String, usize>,
    pub status_proportions: BTreeMap<String, f64>,
}

/// Drops trajectories with an ungrounded numeral in any insight or any
/// invalid verdict. Status balance is reported, not enforced.
pub fn filter_trajectories(dataset: Vec<Trajectory>) -> (Vec<Trajectory>, FilterReport) {
    let total = dataset.len();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for t in dataset {
        match t.dirty_reason() {
            Some(why) => dropped.push((t.name.clone(), why)),
            None => kept.push(t),
        }
    }
    let mut status_counts: BTreeMap<String, usize> = InsightStatus::ALL
        .iter()
        .filter(|s| s.is_incremental())
        .map(|s| (s.as_str().to_string(), 0))
        .collect();
    for j in kept.iter().flat_map(|t| t.steps.iter().flatten()) {
        *status_counts.entry(j.status.as_str().to_string()).or_default() += 1;
    }
    let n: usize = status_counts.values().sum();
    let status_proportions = status_counts
        .iter()
        .map(|(k, v)| (k.clone(), if n == 0 { 0.0 } else { *v as f64 / n as f64 }))
        .collect();
    let report = FilterReport {
        total,
        kept: kept.len(),
        dropped,
        status_counts,
        status_proportions,
    };
    (kept, report)
}

/// What an executed query touched, as seen by the exploration profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTouch {
    pub metrics: Vec<String>,
    pub dimensions: Vec<String>,
    /// Violation kinds raised by calibration, empty when accepted.
    pub violations: Vec<ViolationKind>,
}

pub fn query_touches(log: &EpisodeLog) -> Vec<Option<QueryTouch>> {
    log.steps
        .iter()
        .map(|r| {
            let obs = r.observation.as_ref()?;
            let pkg = obs.feedback()?;
            let q = &pkg.calibration_report.corrected_dsl;
            Some(QueryTouch {
                metrics: q.metric.clone(),
                dimensions: q.dimension.clone(),
                violations: obs.violations.iter().map(|v| v.kind).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationProfile {
    /// Distinct (metric, dimension) pairs per metric theme.
    pub per_theme: BTreeMap<String, usize>,
    pub violations_cumulative: Vec<u32>,
    /// Kinds raised at each step that had a violation.
    pub violation_kinds: Vec<(usize, Vec<ViolationKind>)>,
}

/// Counts distinct metric-dimension pairings of accepted queries under
/// each metric's theme, and accumulates one violation per rejected query.
pub fn exploration_profile(steps: &[Option<QueryTouch>], catalog: &Catalog) -> ExplorationProfile {
    let mut pairs: BTreeSet<(String, String)> = BTreeSet::new();
    let mut per_theme: BTreeMap<String, usize> = catalog
        .metrics_by_theme()
        .keys()
        .map(|t| (t.as_str().to_string(), 0))
        .collect();
    let mut cumulative = Vec::with_capacity(steps.len());
    let mut kinds = Vec::new();
    let mut count = 0u32;
    for (t, touch) in steps.iter().enumerate() {
        if let Some(q) = touch {
            if q.violations.is_empty() {
                for m in &q.metrics {
                    for d in &q.dimensions {
                        if pairs.insert((m.clone(), d.clone())) {
                            if let Some(def) = catalog.metric(m) {
                                *per_theme.entry(def.theme.as_str().to_string()).or_default() += 1;
                            }
                        }
                    }
                }
            } else {
                count += 1;
                kinds.push((t, q.violations.clone()));
            }
        }
        cumulative.push(count);
    }
    ExplorationProfile {
        per_theme,
        violations_cumulative: cumulative,
        violation_kinds: kinds,
    }
}

pub fn write_score_csv(path: &Path, reports: &[(String, ScoreReport)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trajectory", "step", "alpha", "score", "valid_count", "invalid_count", "hallucination_count"])?;
    for (name, r) in reports {
        for s in &r.steps {
            w.write_record([
                name.clone(),
                s.step.to_string(),
                r.alpha.to_string(),
                s.score.to_string(),
                s.valid_count.to_string(),
                s.invalid_count.to_string(),
                s.hallucination_count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_exploration_csv(path: &Path, profiles: &[(String, ExplorationProfile)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trajectory", "theme", "distinct_pairs"])?;
    for (name, p) in profiles {
        for (theme, n) in &p.per_theme {
            w.write_record([name.as_str(), theme.as_str(), &n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_violations_csv(path: &Path, profiles: &[(String, ExplorationProfile)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trajectory", "step", "cumulative_violations", "kinds"])?;
    for (name, p) in profiles {
        for (t, c) in p.violations_cumulative.iter().enumerate() {
            let kinds = p
                .violation_kinds
                .iter()
                .find(|(s, _)| *s == t)
                .map(|(_, k)| k.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            w.write_record([name.clone(), t.to_string(), c.to_string(), kinds])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_filter_report(path: &Path, report: &FilterReport) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    writeln!(f, "{text}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ji(title: &str, valid: bool, h: usize) -> JudgedInsight {
        JudgedInsight {
            title: title.into(),
            status: InsightStatus::New,
            valid: Some(valid),
            hallucinated: h,
        }
    }

    #[test]
    fn insight_scores() {
        assert_eq!(insight_score(true, 0, 0.5), 1.0);
        assert_eq!(insight_score(true, 1, 0.5), 0.5);
        assert_eq!(insight_score(true, 5, 0.5), 0.0);
        assert_eq!(insight_score(false, 0, 0.5), -1.0);
    }

    #[test]
    fn rejudged_title_counts_once() {
        let steps = vec![vec![ji("a", true, 0)], vec![], vec![ji("a", false, 0), ji("b", true, 1)]];
        let r = score_trajectory(&steps, 0.5).unwrap();
        let scores: Vec<f64> = r.steps.iter().map(|s| s.score).collect();
        assert_eq!(scores, vec![1.0, 1.0, -0.5]);
        for t in 0..3 {
            assert_eq!(score_at(&steps, 0.5, t).unwrap(), scores[t]);
        }
        let missing = vec![vec![JudgedInsight {
            valid: None,
            ..ji("x", true, 0)
        }]];
        assert!(score_trajectory(&missing, 0.5).is_err());
    }

    #[test]
    fn exploration_counts_distinct_pairs() {
        let cat = Catalog::default_catalog();
        let q = |m: &str, d: &str| {
            Some(QueryTouch {
                metrics: vec![m.into()],
                dimensions: vec![d.into()],
                violations: vec![],
            })
        };
        let steps = vec![q("netGMV", "isWeek"), q("netGMV", "gender"), q("netGMV", "isWeek"), None];
        let p = exploration_profile(&steps, &cat);
        assert_eq!(p.per_theme["Transaction"], 2);
        assert_eq!(p.violations_cumulative, vec![0, 0, 0, 0]);
        let empty = exploration_profile(&[], &cat);
        assert!(empty.per_theme.values().all(|v| *v == 0));
    }
}

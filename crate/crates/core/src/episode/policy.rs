//! Scripted stand-ins for the language-model policy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::catalog::{Catalog, GrainClass};
use crate::dsl::{Compare, Condition, DslQuery, FilterItem, FilterNode, QueryRule, Relation, Scalar};
use crate::state::{AnalysisState, InsightDelta, InsightStatus, ObservationType, Structure};
use crate::step::{KeyDataEntry, Observation, StepDraft, ToolCall};
use crate::warehouse::{Direction, Scenario, TargetKind};

pub trait Policy: Send {
    /// The next raw turn, or `None` to end the episode.
    fn next_step(&mut self, state: &AnalysisState, last: Option<&Observation>) -> Option<String>;
}

/// Replays recorded turns verbatim.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    turns: Vec<String>,
    next: usize,
}

impl ReplayPolicy {
    pub fn new(turns: Vec<String>) -> Self {
        Self { turns, next: 0 }
    }

    /// Reads JSON lines, each either a string or an object with a
    /// `raw_output` field, so a `steps.jsonl` log can be replayed directly.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut turns = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            let raw = match &v {
                Value::String(s) => s.clone(),
                Value::Object(o) => o
                    .get("raw_output")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| {
                        std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: no raw_output", i + 1))
                    })?,
                _ => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("line {}: expected a string or an object", i + 1),
                    ))
                }
            };
            turns.push(raw);
        }
        Ok(Self::new(turns))
    }
}

impl Policy for ReplayPolicy {
    fn next_step(&mut self, _: &AnalysisState, _: Option<&Observation>) -> Option<String> {
        let t = self.turns.get(self.next).cloned();
        self.next += 1;
        t
    }
}

/// What the explorer investigates.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorerPlan {
    pub metric: String,
    pub window: [String; 2],
    /// Entity filter `(dimension, value)`.
    pub target: Option<(String, String)>,
    /// Drill-down order.
    pub dimensions: Vec<String>,
}

impl ExplorerPlan {
    /// Drill candidates: attribute dimensions that live on the metric's fact
    /// table or the user dimension, minus incompatible pairs, in a
    /// seed-shuffled order.
    pub fn for_scenario(scenario: &Scenario, catalog: &Catalog, seed: u64) -> Self {
        let metric = scenario.effect.metric().to_string();
        let fact = catalog
            .metric(&metric)
            .and_then(|m| m.physical_source())
            .map(|(t, _)| t.to_string())
            .unwrap_or_default();
        let mut dimensions: Vec<String> = catalog
            .dimensions()
            .iter()
            .filter(|d| d.grain_class == GrainClass::Attribute)
            .filter(|d| d.source_table == "dim_usr" || d.source_table == fact)
            .filter(|d| !catalog.compatibility().is_incompatible(&metric, &d.canonical_name))
            .map(|d| d.canonical_name.clone())
            .collect();
        dimensions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let value = scenario.target.value.clone();
        let id_like = |prefix: char| {
            value.len() > 1 && value.starts_with(prefix) && value[1..].bytes().all(|b| b.is_ascii_digit())
        };
        let column = match scenario.target.kind {
            TargetKind::Shop if id_like('S') => "shopId",
            TargetKind::Shop => "shopName",
            TargetKind::Brand if id_like('B') => "brandId",
            TargetKind::Brand => "brandName",
            TargetKind::District => "district",
        };
        Self {
            metric,
            window: scenario.window.clone(),
            target: Some((column.to_string(), value)),
            dimensions,
        }
    }
}

/// One line of the share script's output.
#[derive(Debug, Clone, PartialEq)]
struct ShareLine {
    dimension: String,
    segment: String,
    delta_share: String,
    base_share: String,
    lift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Overview,
    Probe,
    Drill(usize),
    Shares,
    Claim,
    Confirm,
    Done,
}

/// Rule-based explorer: measure the week-over-week change, drill into each
/// candidate dimension, compute each segment's share of the change with the
/// script tool, then claim the segment whose share most exceeds its
/// baseline share.
pub struct ExplorerPolicy {
    plan: ExplorerPlan,
    probe: bool,
    phase: Phase,
    step: u32,
    drills: Vec<(String, Vec<Map<String, Value>>, u32)>,
    shares_step: u32,
    direction: Option<Direction>,
    finding: Option<ShareLine>,
    pending: Option<Phase>,
}

impl ExplorerPolicy {
    pub fn new(plan: ExplorerPlan, probe: bool) -> Self {
        Self {
            plan,
            probe,
            phase: Phase::Overview,
            step: 0,
            drills: Vec::new(),
            shares_step: 0,
            direction: None,
            finding: None,
            pending: None,
        }
    }

    fn query(&self, dims: &[&str], extra: Option<(String, String)>) -> DslQuery {
        let mut q = DslQuery::new(&[self.plan.metric.as_str()], (&self.plan.window[0], &self.plan.window[1]))
            .with_dimensions(dims);
        let conds: Vec<FilterItem> = self
            .plan
            .target
            .iter()
            .cloned()
            .chain(extra)
            .map(|(column, value)| {
                FilterItem::Condition(Condition {
                    column,
                    rule: QueryRule::Eq,
                    params: vec![Scalar::Text(value)],
                })
            })
            .collect();
        if !conds.is_empty() {
            q.filter = Some(FilterNode {
                relation: Relation::And,
                conditions: conds,
            });
        }
        q.compare = vec![Compare::Wow];
        q
    }

    fn change_word(&self) -> &'static str {
        match self.direction {
            Some(Direction::Up) => "rise",
            _ => "decline",
        }
    }

    fn graph(&self) -> String {
        let mut g = String::from("graph TD\nQ[Question]");
        for (i, (dim, _, _)) in self.drills.iter().enumerate() {
            g.push_str(&format!("\nQ -->|drill| D{i}[{dim}]"));
        }
        if let Some(f) = &self.finding {
            if let Some(i) = self.drills.iter().position(|(d, _, _)| *d == f.dimension) {
                g.push_str(&format!("\nD{i} --> F[{} = {}]", f.dimension, f.segment));
            }
        }
        g
    }

    fn shares_script(&self) -> String {
        let m = &self.plan.metric;
        let data: Vec<Value> = self
            .drills
            .iter()
            .map(|(dim, rows, _)| {
                let rows: Vec<Value> = rows
                    .iter()
                    .map(|r| {
                        serde_json::json!([
                            r.get(dim).cloned().unwrap_or(Value::Null),
                            r.get(m).cloned().unwrap_or(Value::Null),
                            r.get(&format!("{m}_wow")).cloned().unwrap_or(Value::Null),
                        ])
                    })
                    .collect();
                serde_json::json!([dim, rows])
            })
            .collect();
        let literal = serde_json::to_string(&data).expect("json");
        format!(
            r#"import json
drills = json.loads(r'''{literal}''')
best = None
for dim, rows in drills:
    rows = [r for r in rows if r[1] is not None and r[2] is not None]
    total_delta = sum(r[2] for r in rows)
    total_prev = sum(r[1] - r[2] for r in rows)
    if total_delta == 0 or total_prev == 0:
        continue
    for seg, cur, delta in rows:
        ds = delta / total_delta
        bs = (cur - delta) / total_prev
        lift = ds - bs
        print(f"{{dim}}={{seg}} delta_share={{ds:.3f}} base_share={{bs:.3f}} lift={{lift:.3f}}")
        if best is None or lift > best[0]:
            best = (lift, dim, seg)
if best:
    print(f"top {{best[1]}}={{best[2]}}")
"#
        )
    }

    fn parse_shares(stdout: &str) -> Option<ShareLine> {
        let top = stdout.lines().find_map(|l| l.strip_prefix("top "))?.trim().to_string();
        for line in stdout.lines() {
            let mut parts = line.split_whitespace();
            let Some(head) = parts.next() else { continue };
            if head != top {
                continue;
            }
            let (dim, seg) = head.split_once('=')?;
            let mut fields = std::collections::HashMap::new();
            for p in parts {
                if let Some((k, v)) = p.split_once('=') {
                    fields.insert(k, v);
                }
            }
            return Some(ShareLine {
                dimension: dim.to_string(),
                segment: seg.to_string(),
                delta_share: fields.get("delta_share")?.to_string(),
                base_share: fields.get("base_share")?.to_string(),
                lift: fields.get("lift")?.parse().ok()?,
            });
        }
        None
    }

    fn summarize(last: Option<&Observation>) -> String {
        match last {
            None => "No observation yet.".into(),
            Some(o) => match o.feedback() {
                Some(p) if !p.execution_results.preview.is_empty() => {
                    let row = &p.execution_results.preview[0];
                    let cells: Vec<String> = row.iter().map(|(k, v)| format!("{k} {v}")).collect();
                    // Only cite observed numbers; a row count would be ungrounded.
                    format!("The first row of the last query reads: {}.", cells.join(", "))
                }
                Some(p) => format!(
                    "The last query ended with status {:?}: {}.",
                    p.status,
                    p.execution_results.error.clone().unwrap_or_default()
                ),
                None => match o.script() {
                    Some(s) => format!("The script finished (exit_ok {}).", s.exit_ok),
                    None => "The last call was rejected.".into(),
                },
            },
        }
    }

    fn advance_phase(&mut self) {
        self.phase = match self.phase {
            Phase::Overview if self.probe => Phase::Probe,
            Phase::Overview | Phase::Probe if self.plan.dimensions.is_empty() => Phase::Done,
            Phase::Overview | Phase::Probe => Phase::Drill(0),
            Phase::Drill(i) if i + 1 < self.plan.dimensions.len() => Phase::Drill(i + 1),
            Phase::Drill(_) => Phase::Shares,
            Phase::Shares => Phase::Claim,
            Phase::Claim => Phase::Confirm,
            Phase::Confirm | Phase::Done => Phase::Done,
        };
    }
}

impl Policy for ExplorerPolicy {
    fn next_step(&mut self, state: &AnalysisState, last: Option<&Observation>) -> Option<String> {
        let step = self.step;
        // Fold in the result of the previous turn's action.
        if let Some(prev) = self.pending.take() {
            let pkg = last.and_then(|o| o.feedback()).filter(|p| p.status == crate::dsl::Status::Success);
            match prev {
                Phase::Overview => {
                    let key = format!("{}_wow", self.plan.metric);
                    let delta = pkg
                        .and_then(|p| p.execution_results.preview.first())
                        .and_then(|r| r.get(&key))
                        .and_then(Value::as_f64);
                    self.direction = delta.map(|d| if d > 0.0 { Direction::Up } else { Direction::Down });
                }
                Phase::Drill(i) => {
                    if let Some(p) = pkg {
                        let dim = self.plan.dimensions[i].clone();
                        self.drills.push((dim, p.execution_results.preview.clone(), step - 1));
                    }
                }
                Phase::Shares => {
                    self.finding = last.and_then(|o| o.script()).and_then(|s| Self::parse_shares(&s.stdout));
                }
                _ => {}
            }
        }

        let mut draft = StepDraft {
            state_think: format!("Question: {} {}", state.q, Self::summarize(last)),
            ..Default::default()
        };
        match self.phase {
            Phase::Overview => {
                draft.action_think = format!(
                    "Measure the week-over-week change of {} for the target before drilling down.",
                    self.plan.metric
                );
                draft.tool_call = Some(ToolCall::dsl(&self.query(&[], None)));
            }
            Phase::Probe => {
                draft.action_think = "Probe a metric name outside the catalog to check the boundary.".into();
                let mut q = self.query(&[], None);
                q.metric = vec!["customerHappiness".into()];
                draft.tool_call = Some(ToolCall::dsl(&q));
            }
            Phase::Drill(i) => {
                let dim = self.plan.dimensions[i].clone();
                draft.graph = (!self.drills.is_empty()).then(|| self.graph());
                draft.action_think = format!("Split {} by {dim} and compare with the previous week.", self.plan.metric);
                draft.tool_call = Some(ToolCall::dsl(&self.query(&[dim.as_str()], None)));
            }
            Phase::Shares => {
                draft.graph = Some(self.graph());
                draft.action_think =
                    "Compute each segment's share of the change against its share of the previous week.".into();
                self.shares_step = step;
                draft.tool_call = Some(ToolCall::python(&self.shares_script()));
            }
            Phase::Claim => {
                let Some(f) = self.finding.clone() else {
                    self.phase = Phase::Done;
                    return None;
                };
                let drill_step = self.drills.iter().find(|(d, _, _)| *d == f.dimension).map(|(_, _, s)| *s);
                draft.insights = Some(vec![InsightDelta {
                    title: format!("{}={} drives the {} {}", f.dimension, f.segment, self.plan.metric, self.change_word()),
                    status: InsightStatus::New,
                    proof: format!(
                        "{}={} carries {} of the week-over-week change of {} against a {} share of the previous week (obs:{}).",
                        f.dimension, f.segment, f.delta_share, self.plan.metric, f.base_share, self.shares_step
                    ),
                }]);
                let mut key = vec![KeyDataEntry {
                    kind: ObservationType::Txt,
                    description: "segment shares of the week-over-week change".into(),
                    structure: Structure {
                        metrics: vec![self.plan.metric.clone()],
                        dimensions: self.drills.iter().map(|(d, _, _)| d.clone()).collect(),
                        filters: Vec::new(),
                    },
                    payload_ref: format!("obs:{}", self.shares_step),
                }];
                if let Some(s) = drill_step {
                    key.insert(
                        0,
                        KeyDataEntry {
                            kind: ObservationType::Csv,
                            description: format!("{} by {}", self.plan.metric, f.dimension),
                            structure: Structure {
                                metrics: vec![self.plan.metric.clone()],
                                dimensions: vec![f.dimension.clone()],
                                filters: Vec::new(),
                            },
                            payload_ref: format!("obs:{s}"),
                        },
                    );
                }
                draft.key_data = Some(key);
                draft.graph = Some(self.graph());
                draft.action_think = format!("Confirm the change within {}={} alone.", f.dimension, f.segment);
                draft.tool_call = Some(ToolCall::dsl(&self.query(&[], Some((f.dimension.clone(), f.segment.clone())))));
            }
            Phase::Confirm => {
                let f = self.finding.clone()?;
                let title = format!("{}={} drives the {} {}", f.dimension, f.segment, self.plan.metric, self.change_word());
                let key = format!("{}_wow", self.plan.metric);
                let pct_key = format!("{}_wow_pct", self.plan.metric);
                let row = last.and_then(|o| o.feedback()).and_then(|p| p.execution_results.preview.first().cloned());
                let proof = match row {
                    Some(r) => {
                        let delta = r.get(&key).and_then(Value::as_f64);
                        let pct = r.get(&pct_key).and_then(Value::as_f64);
                        match (delta, pct) {
                            (Some(d), Some(p)) => format!(
                                "Within {}={} alone {} changed by {d:.2} ({p:.1}% week over week) (obs:{}).",
                                f.dimension,
                                f.segment,
                                self.plan.metric,
                                step - 1
                            ),
                            _ => format!("Within {}={} alone the change persists (obs:{}).", f.dimension, f.segment, step - 1),
                        }
                    }
                    None => format!("Within {}={} alone the change persists.", f.dimension, f.segment),
                };
                if state.insight(&title).is_some() {
                    draft.insights = Some(vec![InsightDelta {
                        title,
                        status: InsightStatus::Reinforced,
                        proof,
                    }]);
                }
                draft.graph = Some(self.graph());
                draft.action_think = "Record the conclusion.".into();
                draft.tool_call = Some(ToolCall::python("print('analysis complete')"));
            }
            Phase::Done => return None,
        }
        self.pending = Some(self.phase);
        self.advance_phase();
        self.step += 1;
        Some(draft.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn share_lines() {
        let out = "userLevel=new delta_share=0.812 base_share=0.201 lift=0.611\nuserLevel=vip delta_share=0.100 base_share=0.300 lift=-0.200\ntop userLevel=new\n";
        let f = ExplorerPolicy::parse_shares(out).unwrap();
        assert_eq!(f.segment, "new");
        assert_eq!(f.delta_share, "0.812");
        assert!((f.lift - 0.611).abs() < 1e-12);
        assert!(ExplorerPolicy::parse_shares("nothing").is_none());
    }

    #[test]
    fn replay_reads_strings_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        std::fs::write(&p, "\"a\"\n{\"raw_output\": \"b\", \"step_index\": 1}\n").unwrap();
        let mut r = ReplayPolicy::from_file(&p).unwrap();
        let s = AnalysisState::default();
        assert_eq!(r.next_step(&s, None).as_deref(), Some("a"));
        assert_eq!(r.next_step(&s, None).as_deref(), Some("b"));
        assert_eq!(r.next_step(&s, None), None);
    }
}

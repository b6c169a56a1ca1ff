//! The analysis state: target ids, question, insights, observation log and
//! reasoning graph, advanced one turn at a time by pure updates.

mod mermaid;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerals::GroundingIndex;

pub use mermaid::{validate_mermaid, GraphEdge, GraphNode, ReasoningGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InsightStatus {
    New,
    Unchanged,
    Reinforced,
    Refuted,
}

impl InsightStatus {
    pub const ALL: [InsightStatus; 4] = [
        InsightStatus::New,
        InsightStatus::Unchanged,
        InsightStatus::Reinforced,
        InsightStatus::Refuted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InsightStatus::New => "New",
            InsightStatus::Unchanged => "Unchanged",
            InsightStatus::Reinforced => "Reinforced",
            InsightStatus::Refuted => "Refuted",
        }
    }

    /// Statuses that carry new information and are judged.
    pub fn is_incremental(self) -> bool {
        self != InsightStatus::Unchanged
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusChange {
    pub step: u32,
    pub status: InsightStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insight {
    pub title: String,
    pub status: InsightStatus,
    pub proof: String,
    pub first_seen_step: u32,
    pub last_updated_step: u32,
    #[serde(default)]
    pub history: Vec<StatusChange>,
}

/// An insight as written in one turn's `<insight>` block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsightDelta {
    pub title: String,
    pub status: InsightStatus,
    #[serde(default)]
    pub proof: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObservationType {
    #[serde(rename = "CSV")]
    Csv,
    #[serde(rename = "TXT")]
    Txt,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Structure {
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub dimensions: Vec<String>,
    #[serde(default)]
    pub filters: Vec<String>,
}

/// Who wrote an observation-log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Environment,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub index: usize,
    pub step: u32,
    pub source: EntrySource,
    #[serde(rename = "type")]
    pub kind: ObservationType,
    pub description: String,
    pub structure: Structure,
    /// `obs:<step>` for environment observations, or inline text.
    pub payload_ref: String,
    pub numerals: GroundingIndex,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub insight_updates: Vec<InsightDelta>,
    pub observation_appends: Vec<ObservationEntry>,
    pub graph_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("insight `{0}` already exists; first appearance must be the only New")]
    NewOnExisting(String),
    #[error("insight `{title}` does not exist; cannot mark it {status}")]
    MissingTitle { title: String, status: &'static str },
    #[error("insight `{0}` needs a non-empty proof")]
    EmptyProof(String),
    #[error("insight `{0}` appears twice in one update")]
    DuplicateInUpdate(String),
    #[error("insight title must not be empty")]
    EmptyTitle,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisState {
    /// Entity identifiers scoping the analysis (shop, brand, district...).
    pub id: BTreeMap<String, String>,
    pub q: String,
    pub insights: Vec<Insight>,
    pub observations: Vec<ObservationEntry>,
    pub graph: ReasoningGraph,
    pub step_index: u32,
}

impl AnalysisState {
    pub fn new(id: BTreeMap<String, String>, question: impl Into<String>) -> Self {
        Self {
            id,
            q: question.into(),
            ..Default::default()
        }
    }

    pub fn insight(&self, title: &str) -> Option<&Insight> {
        self.insights.iter().find(|i| i.title == title)
    }

    /// Union of every observation's numerals.
    pub fn grounding_index(&self) -> GroundingIndex {
        let mut idx = GroundingIndex::new();
        for o in &self.observations {
            idx.union_with(&o.numerals);
        }
        idx
    }

    /// Checks an update against this state without applying it.
    pub fn check_update(&self, update: &StateUpdate) -> Result<(), TransitionError> {
        let mut seen = BTreeSet::new();
        for d in &update.insight_updates {
            if d.title.trim().is_empty() {
                return Err(TransitionError::EmptyTitle);
            }
            if !seen.insert(d.title.as_str()) {
                return Err(TransitionError::DuplicateInUpdate(d.title.clone()));
            }
            let exists = self.insight(&d.title).is_some();
            match d.status {
                InsightStatus::New if exists => return Err(TransitionError::NewOnExisting(d.title.clone())),
                InsightStatus::New => {}
                s if !exists => {
                    return Err(TransitionError::MissingTitle {
                        title: d.title.clone(),
                        status: s.as_str(),
                    })
                }
                _ => {}
            }
            if d.status.is_incremental() && d.proof.trim().is_empty() {
                return Err(TransitionError::EmptyProof(d.title.clone()));
            }
        }
        Ok(())
    }

    /// Returns the merged state; `self` is left untouched.
    pub fn apply_update(&self, update: &StateUpdate) -> Result<AnalysisState, TransitionError> {
        self.check_update(update)?;
        let mut next = self.clone();
        let step = self.step_index;
        for d in &update.insight_updates {
            match d.status {
                InsightStatus::New => next.insights.push(Insight {
                    title: d.title.clone(),
                    status: InsightStatus::New,
                    proof: d.proof.clone(),
                    first_seen_step: step,
                    last_updated_step: step,
                    history: vec![StatusChange {
                        step,
                        status: InsightStatus::New,
                    }],
                }),
                status => {
                    let ins = next
                        .insights
                        .iter_mut()
                        .find(|i| i.title == d.title)
                        .expect("checked above");
                    if status == InsightStatus::Unchanged {
                        continue;
                    }
                    ins.status = status;
                    ins.proof = d.proof.clone();
                    ins.last_updated_step = step;
                    ins.history.push(StatusChange { step, status });
                }
            }
        }
        for o in &update.observation_appends {
            let mut o = o.clone();
            o.index = next.observations.len();
            next.observations.push(o);
        }
        if let Some(text) = &update.graph_text {
            next.graph = validate_mermaid(text);
        }
        Ok(next)
    }

    /// Advances the turn counter.
    pub fn next_step(mut self) -> Self {
        self.step_index += 1;
        self
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(title: &str, status: InsightStatus, proof: &str) -> InsightDelta {
        InsightDelta {
            title: title.into(),
            status,
            proof: proof.into(),
        }
    }

    fn upd(deltas: Vec<InsightDelta>) -> StateUpdate {
        StateUpdate {
            insight_updates: deltas,
            ..Default::default()
        }
    }

    fn obs(values: &[f64]) -> ObservationEntry {
        ObservationEntry {
            index: 0,
            step: 0,
            source: EntrySource::Environment,
            kind: ObservationType::Csv,
            description: "q".into(),
            structure: Structure::default(),
            payload_ref: "obs:0".into(),
            numerals: GroundingIndex::from_values(values.iter().copied()),
        }
    }

    #[test]
    fn new_then_refuted() {
        let s0 = AnalysisState::default();
        let s1 = s0.apply_update(&upd(vec![delta("a", InsightStatus::New, "p1")])).unwrap();
        assert_eq!(s0.insights.len(), 0);
        assert_eq!(s1.insights[0].status, InsightStatus::New);
        let s2 = s1
            .clone()
            .next_step()
            .apply_update(&upd(vec![delta("a", InsightStatus::Refuted, "p2")]))
            .unwrap();
        assert_eq!(s2.insights.len(), 1);
        assert_eq!(s2.insights[0].proof, "p2");
        assert_eq!(s2.insights[0].status, InsightStatus::Refuted);
        assert_eq!(s2.insights[0].last_updated_step, 1);
        let s3 = s2.apply_update(&upd(vec![delta("a", InsightStatus::Reinforced, "p3")])).unwrap();
        assert_eq!(s3.insights[0].history.len(), 3);
    }

    #[test]
    fn transition_errors() {
        let s = AnalysisState::default();
        assert!(matches!(
            s.apply_update(&upd(vec![delta("x", InsightStatus::Reinforced, "p")])),
            Err(TransitionError::MissingTitle { .. })
        ));
        let s = s.apply_update(&upd(vec![delta("x", InsightStatus::New, "p")])).unwrap();
        assert!(matches!(
            s.apply_update(&upd(vec![delta("x", InsightStatus::New, "p")])),
            Err(TransitionError::NewOnExisting(_))
        ));
        assert!(matches!(
            s.apply_update(&upd(vec![delta("y", InsightStatus::New, " ")])),
            Err(TransitionError::EmptyProof(_))
        ));
    }

    #[test]
    fn grounding_index_is_a_set_union() {
        assert!(AnalysisState::default().grounding_index().is_empty());
        let s = AnalysisState::default()
            .apply_update(&StateUpdate {
                observation_appends: vec![obs(&[15.2, 45000.0]), obs(&[15.2])],
                ..Default::default()
            })
            .unwrap();
        let idx = s.grounding_index();
        assert_eq!(idx.values().collect::<Vec<_>>(), vec![15.2, 45000.0]);
        assert_eq!(s.observations[1].index, 1);
    }
}

//! Per-step rewards: format and schema checks, numeric grounding, length
//! shaping and judged discovery gain.

mod judge;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::dsl::Status;
use crate::numerals::{extract_numerals, GroundingIndex};
use crate::state::{AnalysisState, InsightDelta, InsightStatus, StateUpdate};
use crate::step::{check_key_data, key_data_entries, Observation, StepOutput, Tool};

pub use judge::{
    parse_verdict, render_judge_prompt, JudgeClient, JudgeError, JudgeRequest, JudgeVerdict, MockJudge, RemoteJudge,
    DOMINANT_SHARE, JUDGE_TEMPLATE, MINOR_SHARE,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationCount {
    /// Ungrounded numerals.
    pub n: usize,
    /// Grounded numerals.
    pub m: usize,
}

impl HallucinationCount {
    pub fn value(self) -> f64 {
        hallucination_value(self.m, self.n)
    }
}

pub fn hallucination_value(m: usize, n: usize) -> f64 {
    (0.01 * m as f64 - 0.1 * n as f64).clamp(-1.0, 0.1)
}

pub fn count_hallucinations(text: &str, grounding: &GroundingIndex) -> HallucinationCount {
    let mut c = HallucinationCount::default();
    for num in extract_numerals(text) {
        if grounding.grounds(&num) {
            c.m += 1;
        } else {
            c.n += 1;
        }
    }
    c
}

pub fn hallucination_penalty(text: &str, grounding: &GroundingIndex) -> (f64, HallucinationCount) {
    let c = count_hallucinations(text, grounding);
    (c.value(), c)
}

/// `scale * clip((len - min) / (max - min), 0, 1)`.
pub fn length_reward(len: usize, min: usize, max: usize, scale: f64) -> f64 {
    assert!(min < max, "length bounds must satisfy min < max");
    let frac = (len as f64 - min as f64) / (max as f64 - min as f64);
    scale * frac.clamp(0.0, 1.0)
}

/// Whitespace-delimited token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainParams {
    pub eta: f64,
    pub invalid_penalty: f64,
    pub base_new: f64,
    pub base_refuted: f64,
    pub base_reinforced: f64,
    pub floor: f64,
}

impl Default for GainParams {
    fn default() -> Self {
        Self {
            eta: 0.4,
            invalid_penalty: -2.0,
            base_new: 1.0,
            base_refuted: 0.7,
            base_reinforced: 0.5,
            floor: 0.1,
        }
    }
}

impl GainParams {
    pub fn base(&self, status: InsightStatus) -> f64 {
        match status {
            InsightStatus::New => self.base_new,
            InsightStatus::Refuted => self.base_refuted,
            InsightStatus::Reinforced => self.base_reinforced,
            InsightStatus::Unchanged => 0.0,
        }
    }

    /// Gain for one judged insight with `hallucinated` ungrounded numerals.
    pub fn insight_gain(&self, status: InsightStatus, valid: bool, hallucinated: usize) -> f64 {
        if valid {
            (self.base(status) - self.eta * hallucinated as f64).max(self.floor)
        } else {
            self.invalid_penalty
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightJudgement {
    pub title: String,
    pub status: InsightStatus,
    pub valid: bool,
    pub rationale: String,
    /// Ungrounded numerals in title and proof.
    pub hallucinated: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GainOutcome {
    pub value: f64,
    pub details: Vec<InsightJudgement>,
    pub judge_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

impl GainOutcome {
    pub fn has_invalid(&self) -> bool {
        self.details.iter().any(|d| !d.valid)
    }
}

/// What the judge is shown besides the candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct JudgeContext<'a> {
    pub question: &'a str,
    pub action: &'a str,
    pub observation: &'a str,
}

/// Judges each incremental insight in turn. Each one joins the "previous"
/// set before the next is judged. A judge error zeroes the whole step and
/// sets `judge_failed`.
pub fn discovery_gain(
    new_insights: &[InsightDelta],
    judge: &dyn JudgeClient,
    prev_state: &AnalysisState,
    ctx: JudgeContext<'_>,
    params: &GainParams,
) -> GainOutcome {
    let grounding = prev_state.grounding_index();
    let mut previous: Vec<InsightDelta> = prev_state
        .insights
        .iter()
        .map(|i| InsightDelta {
            title: i.title.clone(),
            status: i.status,
            proof: i.proof.clone(),
        })
        .collect();
    let mut out = GainOutcome::default();
    for c in new_insights.iter().filter(|c| c.status.is_incremental()) {
        let req = JudgeRequest {
            question: ctx.question,
            previous: &previous,
            action: ctx.action,
            observation: ctx.observation,
            candidate: c,
        };
        let verdict = match judge.judge(&req) {
            Ok(v) => v,
            Err(e) => {
                return GainOutcome {
                    value: 0.0,
                    details: Vec::new(),
                    judge_failed: true,
                    judge_error: Some(e.to_string()),
                }
            }
        };
        let hallucinated = count_hallucinations(&format!("{}\n{}", c.title, c.proof), &grounding).n;
        let gain = params.insight_gain(c.status, verdict.valid, hallucinated);
        out.value += gain;
        out.details.push(InsightJudgement {
            title: c.title.clone(),
            status: c.status,
            valid: verdict.valid,
            rationale: verdict.rationale,
            hallucinated,
            gain,
        });
        previous.push(c.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub gain: GainParams,
    pub state_length: (usize, usize),
    pub action_length: (usize, usize),
    pub length_scale: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            gain: GainParams::default(),
            state_length: (500, 1000),
            action_length: (500, 700),
            length_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step_format: f64,
    pub hallu_state: f64,
    pub hallu_action: f64,
    pub schema_insight: f64,
    pub schema_key_data: f64,
    pub mermaid_render: f64,
    pub json_schema: f64,
    pub script_exec: f64,
    pub length_state: f64,
    pub length_action: f64,
    pub discovery_gain: f64,
    pub intermediate_total: f64,
    pub accumulated_total: f64,
}

impl RewardBreakdown {
    /// Recomputes both totals from the components.
    pub fn totals(mut self) -> Self {
        self.intermediate_total = self.step_format
            + self.hallu_state
            + self.hallu_action
            + self.schema_insight
            + self.schema_key_data
            + self.mermaid_render
            + self.json_schema
            + self.script_exec;
        self.accumulated_total = self.length_state + self.length_action + self.discovery_gain;
        self
    }
}

/// The evidence behind a breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardDetail {
    pub gain: GainOutcome,
    pub state_numerals: HallucinationCount,
    pub action_numerals: HallucinationCount,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schema_problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub breakdown: RewardBreakdown,
    pub detail: RewardDetail,
}

impl RewardBreakdown {
    /// The turn broke the output protocol or a block schema.
    pub fn syntax_failed(&self) -> bool {
        self.step_format < 0.0 || self.schema_insight < 0.0 || self.schema_key_data < 0.0 || self.json_schema < 0.0
    }
}

pub struct StepContext<'a> {
    /// State before this turn; its observations are the grounding source.
    pub prev_state: &'a AnalysisState,
    pub catalog: &'a Catalog,
    /// Result of this turn's tool call, if it ran.
    pub observation: Option<&'a Observation>,
    pub judge: &'a dyn JudgeClient,
    pub judge_context: JudgeContext<'a>,
    pub params: &'a RewardParams,
}

/// The insight and key_data blocks as a state update, or the reasons they
/// cannot be merged.
pub fn step_update(step: &StepOutput, ctx: &StepContext<'_>) -> (StateUpdate, Vec<String>) {
    let mut problems = Vec::new();
    let mut update = StateUpdate::default();
    if let Some(b) = &step.insight_block {
        match &b.value {
            Some(deltas) => {
                let candidate = StateUpdate {
                    insight_updates: deltas.clone(),
                    ..Default::default()
                };
                match ctx.prev_state.check_update(&candidate) {
                    Ok(()) => update.insight_updates = deltas.clone(),
                    Err(e) => problems.push(format!("insight: {e}")),
                }
            }
            None => problems.push(format!("insight: {}", b.error.clone().unwrap_or_default())),
        }
    }
    if let Some(b) = &step.key_data_block {
        match &b.value {
            Some(entries) => {
                let mut p = check_key_data(entries, ctx.catalog, ctx.prev_state);
                if p.is_empty() {
                    update.observation_appends = key_data_entries(entries, ctx.prev_state, ctx.prev_state.step_index);
                }
                problems.append(&mut p);
            }
            None => problems.push(format!("key_data: {}", b.error.clone().unwrap_or_default())),
        }
    }
    update.graph_text = step.graph_block.clone();
    (update, problems)
}

pub fn score_step(step: &StepOutput, ctx: &StepContext<'_>) -> StepScore {
    let p = ctx.params;
    let grounding = ctx.prev_state.grounding_index();
    let (hallu_state, state_numerals) = hallucination_penalty(&step.state_think, &grounding);
    let (hallu_action, action_numerals) = hallucination_penalty(&step.action_think, &grounding);

    let (update, schema_problems) = step_update(step, ctx);
    let insight_bad = schema_problems.iter().any(|s| s.starts_with("insight"));
    let key_data_bad = schema_problems.iter().any(|s| !s.starts_with("insight"));

    let mermaid_bad = step
        .graph_block
        .as_deref()
        .is_some_and(|g| !crate::state::validate_mermaid(g).parse_ok);
    let call_bad = step.tool_call.as_ref().is_none_or(|c| !c.schema_ok);
    let script_bad = ctx
        .observation
        .is_some_and(|o| o.tool == Some(Tool::Python) && o.status != Status::Success);

    let gain = if insight_bad {
        GainOutcome::default()
    } else {
        discovery_gain(&update.insight_updates, ctx.judge, ctx.prev_state, ctx.judge_context, &p.gain)
    };
    let neg = |bad: bool| if bad { -1.0 } else { 0.0 };
    let breakdown = RewardBreakdown {
        step_format: neg(!step.format_ok),
        hallu_state,
        hallu_action,
        schema_insight: neg(insight_bad),
        schema_key_data: neg(key_data_bad),
        mermaid_render: neg(mermaid_bad),
        json_schema: neg(call_bad),
        script_exec: neg(script_bad),
        length_state: length_reward(token_count(&step.state_think), p.state_length.0, p.state_length.1, p.length_scale),
        length_action: length_reward(
            token_count(&step.action_think),
            p.action_length.0,
            p.action_length.1,
            p.length_scale,
        ),
        discovery_gain: gain.value,
        ..Default::default()
    }
    .totals();
    StepScore {
        breakdown,
        detail: RewardDetail {
            gain,
            state_numerals,
            action_numerals,
            schema_problems,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hallucination_values() {
        assert_eq!(hallucination_value(10, 0), 0.1);
        assert_eq!(hallucination_value(0, 20), -1.0);
        assert!((hallucination_value(5, 2) - -0.15).abs() < 1e-12);
        let g = GroundingIndex::from_values([15.23, 45000.0]);
        let (_, c) = hallucination_penalty("aov 15.2, gmv 45,000, margin 9.9", &g);
        assert_eq!((c.m, c.n), (2, 1));
    }

    #[test]
    fn length_values() {
        assert_eq!(length_reward(500, 500, 1000, 0.1), 0.0);
        assert!((length_reward(1000, 500, 1000, 0.1) - 0.1).abs() < 1e-15);
        assert!((length_reward(750, 500, 1000, 0.1) - 0.05).abs() < 1e-15);
        assert_eq!(length_reward(10, 500, 700, 0.1), 0.0);
        assert_eq!(token_count("  a b\n c\t"), 3);
    }

    #[test]
    fn gain_terms() {
        let g = GainParams::default();
        assert_eq!(g.insight_gain(InsightStatus::New, true, 0), 1.0);
        assert!((g.insight_gain(InsightStatus::New, true, 2) - 0.2).abs() < 1e-12);
        assert_eq!(g.insight_gain(InsightStatus::Reinforced, true, 3), 0.1);
        assert_eq!(g.insight_gain(InsightStatus::Refuted, false, 0), -2.0);
    }

    struct Failing;
    impl JudgeClient for Failing {
        fn judge(&self, _: &JudgeRequest<'_>) -> Result<JudgeVerdict, JudgeError> {
            Err(JudgeError::Transport("down".into()))
        }
    }

    #[test]
    fn judge_failure_zeroes_gain() {
        let d = InsightDelta {
            title: "t".into(),
            status: InsightStatus::New,
            proof: "p".into(),
        };
        let out = discovery_gain(
            &[d],
            &Failing,
            &AnalysisState::default(),
            JudgeContext::default(),
            &GainParams::default(),
        );
        assert!(out.judge_failed);
        assert_eq!(out.value, 0.0);
    }
}

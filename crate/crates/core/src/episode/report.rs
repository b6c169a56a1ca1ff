//! Plain-text report rendered from the final state.

use std::fmt::Write;

use super::StepRecord;
use crate::state::{AnalysisState, InsightStatus};

pub fn render_report(state: &AnalysisState, records: &[StepRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Question: {}", state.q);
    for (k, v) in &state.id {
        let _ = writeln!(out, "  {k}: {v}");
    }
    let _ = writeln!(out, "Steps: {}", records.len());

    let _ = writeln!(out, "\nInsights");
    let live: Vec<_> = state
        .insights
        .iter()
        .filter(|i| i.status != InsightStatus::Refuted)
        .collect();
    if live.is_empty() {
        let _ = writeln!(out, "  (none)");
    }
    for i in &live {
        let _ = writeln!(out, "  - {} [{}]", i.title, i.status.as_str());
        let _ = writeln!(out, "    {}", i.proof);
    }
    let refuted: Vec<_> = state
        .insights
        .iter()
        .filter(|i| i.status == InsightStatus::Refuted)
        .collect();
    if !refuted.is_empty() {
        let _ = writeln!(out, "\nRuled out");
        for i in refuted {
            let _ = writeln!(out, "  - {}", i.title);
            let _ = writeln!(out, "    {}", i.proof);
        }
    }

    let _ = writeln!(out, "\nEvidence");
    for o in &state.observations {
        let _ = writeln!(out, "  [{}] step {} {:?}: {}", o.payload_ref, o.step, o.kind, o.description);
    }

    if !state.graph.source_text.is_empty() {
        let _ = writeln!(out, "\nReasoning graph");
        for line in state.graph.source_text.lines() {
            let _ = writeln!(out, "  {line}");
        }
    }

    let (mut inter, mut acc) = (0.0, 0.0);
    for b in records.iter().filter_map(|r| r.reward_breakdown.as_ref()) {
        inter += b.intermediate_total;
        acc += b.accumulated_total;
    }
    let _ = writeln!(out, "\nReward: intermediate {inter:.4}, accumulated {acc:.4}");
    out
}

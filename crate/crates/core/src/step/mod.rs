//! One agent turn: tagged blocks in, tool call out, observation back.
//!
//! A turn is plain text made of up to six blocks, in this order:
//! `<state_think>`, `<insight>`, `<key_data>`, `<graph>`, `<action_think>`,
//! `<tool_call>`. The first, fifth and sixth are required.

mod env;
pub mod sandbox;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::Catalog;
use crate::dsl::DslQuery;
use crate::state::{AnalysisState, EntrySource, InsightDelta, ObservationEntry, ObservationType, Structure};

pub use env::{Environment, Observation, ObservationBody};
pub use sandbox::{run_script, SandboxConfig, ScriptOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockTag {
    StateThink,
    Insight,
    KeyData,
    Graph,
    ActionThink,
    ToolCall,
}

impl BlockTag {
    pub const ORDER: [BlockTag; 6] = [
        BlockTag::StateThink,
        BlockTag::Insight,
        BlockTag::KeyData,
        BlockTag::Graph,
        BlockTag::ActionThink,
        BlockTag::ToolCall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockTag::StateThink => "state_think",
            BlockTag::Insight => "insight",
            BlockTag::KeyData => "key_data",
            BlockTag::Graph => "graph",
            BlockTag::ActionThink => "action_think",
            BlockTag::ToolCall => "tool_call",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|t| t.name() == s)
    }

    pub fn required(self) -> bool {
        matches!(self, BlockTag::StateThink | BlockTag::ActionThink | BlockTag::ToolCall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tool {
    #[serde(rename = "dsl2data")]
    Dsl2Data,
    #[serde(rename = "python")]
    Python,
}

impl Tool {
    pub fn as_str(self) -> &'static str {
        match self {
            Tool::Dsl2Data => "dsl2data",
            Tool::Python => "python",
        }
    }
}

/// A parsed `<tool_call>` block. `tool` is `None` when the payload does
/// not name a known tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: Option<Tool>,
    pub arguments: Value,
    pub schema_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub raw: String,
}

impl ToolCall {
    pub fn dsl(query: &DslQuery) -> Self {
        let payload = serde_json::json!({"tool": "dsl2data", "arguments": query});
        Self::parse(&payload.to_string())
    }

    pub fn python(code: &str) -> Self {
        let payload = serde_json::json!({"tool": "python", "arguments": {"code": code}});
        Self::parse(&payload.to_string())
    }

    /// Validates `{"tool": ..., "arguments": {...}}` against the named
    /// tool's schema. Never fails; problems land in `error`.
    pub fn parse(raw: &str) -> Self {
        let mut call = ToolCall {
            tool: None,
            arguments: Value::Null,
            schema_ok: false,
            error: None,
            raw: raw.to_string(),
        };
        let v: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                call.error = Some(format!("tool call is not valid JSON: {e}"));
                return call;
            }
        };
        let Some(obj) = v.as_object() else {
            call.error = Some("tool call must be a JSON object".into());
            return call;
        };
        if let Some(extra) = obj.keys().find(|k| *k != "tool" && *k != "arguments") {
            call.error = Some(format!("unknown key `{extra}` in tool call"));
            return call;
        }
        call.tool = match obj.get("tool").and_then(Value::as_str) {
            Some("dsl2data") => Some(Tool::Dsl2Data),
            Some("python") => Some(Tool::Python),
            Some(other) => {
                call.error = Some(format!("unknown tool `{other}`"));
                return call;
            }
            None => {
                call.error = Some("tool call needs a string `tool`".into());
                return call;
            }
        };
        call.arguments = obj.get("arguments").cloned().unwrap_or(Value::Null);
        let check = match call.tool {
            Some(Tool::Dsl2Data) => DslQuery::from_value(&call.arguments).map(|_| ()).map_err(|e| e.to_string()),
            Some(Tool::Python) => python_arguments(&call.arguments).map(|_| ()),
            None => unreachable!(),
        };
        match check {
            Ok(()) => call.schema_ok = true,
            Err(e) => call.error = Some(e),
        }
        call
    }

    pub fn dsl_query(&self) -> Option<DslQuery> {
        match (self.tool, self.schema_ok) {
            (Some(Tool::Dsl2Data), true) => DslQuery::from_value(&self.arguments).ok(),
            _ => None,
        }
    }

    pub fn python_code(&self) -> Option<&str> {
        match (self.tool, self.schema_ok) {
            (Some(Tool::Python), true) => python_arguments(&self.arguments).ok(),
            _ => None,
        }
    }
}

fn python_arguments(args: &Value) -> Result<&str, String> {
    let obj = args.as_object().ok_or("python arguments must be an object")?;
    if let Some(extra) = obj.keys().find(|k| *k != "code") {
        return Err(format!("unknown key `{extra}` in python arguments"));
    }
    match obj.get("code").and_then(Value::as_str) {
        Some(code) if !code.trim().is_empty() => Ok(code),
        Some(_) => Err("python `code` is empty".into()),
        None => Err("python arguments need a string `code`".into()),
    }
}

/// One `<key_data>` entry as the agent writes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyDataEntry {
    #[serde(rename = "type")]
    pub kind: ObservationType,
    pub description: String,
    #[serde(default)]
    pub structure: Structure,
    pub payload_ref: String,
}

/// A block whose body must parse as JSON of type `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonBlock<T> {
    pub raw: String,
    pub value: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl<T: serde::de::DeserializeOwned> JsonBlock<T> {
    fn parse(raw: &str) -> Self {
        match serde_json::from_str(raw) {
            Ok(v) => Self {
                raw: raw.to_string(),
                value: Some(v),
                error: None,
            },
            Err(e) => Self {
                raw: raw.to_string(),
                value: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub state_think: String,
    pub insight_block: Option<JsonBlock<Vec<InsightDelta>>>,
    pub key_data_block: Option<JsonBlock<Vec<KeyDataEntry>>>,
    pub graph_block: Option<String>,
    pub action_think: String,
    pub tool_call: Option<ToolCall>,
    pub format_ok: bool,
    pub block_diagnostics: Vec<String>,
}

impl StepOutput {
    /// Incremental insight entries (anything but Unchanged) of a block that
    /// parsed.
    pub fn incremental_insights(&self) -> Vec<InsightDelta> {
        self.insights().into_iter().filter(|d| d.status.is_incremental()).collect()
    }

    pub fn insights(&self) -> Vec<InsightDelta> {
        self.insight_block.as_ref().and_then(|b| b.value.clone()).unwrap_or_default()
    }

    pub fn key_data(&self) -> Vec<KeyDataEntry> {
        self.key_data_block.as_ref().and_then(|b| b.value.clone()).unwrap_or_default()
    }
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<(/?)(state_think|insight|key_data|graph|action_think|tool_call)>").expect("tag regex")
    })
}

/// Splits a raw turn into blocks. Never fails: anything off-protocol clears
/// `format_ok` and leaves a diagnostic.
pub fn parse_step(raw: &str) -> StepOutput {
    let mut diags: Vec<String> = Vec::new();
    let mut blocks: Vec<(BlockTag, String)> = Vec::new();
    let mut open: Option<(BlockTag, usize)> = None;
    let mut cursor = 0;
    for m in tag_re().captures_iter(raw) {
        let whole = m.get(0).expect("match");
        let closing = &m[1] == "/";
        let tag = BlockTag::from_name(&m[2]).expect("regex alternatives are tags");
        match (open, closing) {
            (None, false) => {
                let stray = raw[cursor..whole.start()].trim();
                if !stray.is_empty() {
                    diags.push(format!("stray text before <{}>", tag.name()));
                }
                open = Some((tag, whole.end()));
            }
            (None, true) => {
                diags.push(format!("closing </{}> without opening tag", tag.name()));
                cursor = whole.end();
            }
            (Some((cur, start)), true) if cur == tag => {
                blocks.push((tag, raw[start..whole.start()].trim().to_string()));
                open = None;
                cursor = whole.end();
            }
            (Some((cur, _)), true) => {
                diags.push(format!("</{}> closes <{}>", tag.name(), cur.name()));
            }
            (Some((cur, _)), false) => {
                diags.push(format!("<{}> nested inside <{}>", tag.name(), cur.name()));
            }
        }
    }
    if let Some((cur, _)) = open {
        diags.push(format!("unclosed <{}>", cur.name()));
    } else if !raw[cursor..].trim().is_empty() {
        diags.push("stray text after last block".into());
    }

    let mut last: Option<BlockTag> = None;
    let mut seen = std::collections::BTreeSet::new();
    for (tag, _) in &blocks {
        if !seen.insert(*tag) {
            diags.push(format!("duplicate {}", tag.name()));
        } else if last.is_some_and(|l| l > *tag) {
            diags.push(format!("{} out of order", tag.name()));
        }
        last = Some(last.map_or(*tag, |l| l.max(*tag)));
    }
    for tag in BlockTag::ORDER {
        if tag.required() && !seen.contains(&tag) {
            diags.push(format!("missing {}", tag.name()));
        }
    }

    let body = |t: BlockTag| blocks.iter().find(|(b, _)| *b == t).map(|(_, s)| s.as_str());
    StepOutput {
        state_think: body(BlockTag::StateThink).unwrap_or_default().to_string(),
        insight_block: body(BlockTag::Insight).map(JsonBlock::parse),
        key_data_block: body(BlockTag::KeyData).map(JsonBlock::parse),
        graph_block: body(BlockTag::Graph).map(str::to_string),
        action_think: body(BlockTag::ActionThink).unwrap_or_default().to_string(),
        tool_call: body(BlockTag::ToolCall).map(ToolCall::parse),
        format_ok: diags.is_empty(),
        block_diagnostics: diags,
    }
}

fn push_block(out: &mut String, tag: BlockTag, body: &str) {
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(&format!("<{0}>\n{1}\n</{0}>", tag.name(), body));
}

/// Writes a step back out in canonical order. Required blocks are always
/// emitted, optional ones only when present.
pub fn render_step(step: &StepOutput) -> String {
    let mut out = String::new();
    push_block(&mut out, BlockTag::StateThink, &step.state_think);
    if let Some(b) = &step.insight_block {
        push_block(&mut out, BlockTag::Insight, &b.raw);
    }
    if let Some(b) = &step.key_data_block {
        push_block(&mut out, BlockTag::KeyData, &b.raw);
    }
    if let Some(g) = &step.graph_block {
        push_block(&mut out, BlockTag::Graph, g);
    }
    push_block(&mut out, BlockTag::ActionThink, &step.action_think);
    if let Some(c) = &step.tool_call {
        push_block(&mut out, BlockTag::ToolCall, &c.raw);
    }
    out
}

/// Builder used by scripted policies to produce well-formed turns.
#[derive(Debug, Clone, Default)]
pub struct StepDraft {
    pub state_think: String,
    pub insights: Option<Vec<InsightDelta>>,
    pub key_data: Option<Vec<KeyDataEntry>>,
    pub graph: Option<String>,
    pub action_think: String,
    pub tool_call: Option<ToolCall>,
}

impl StepDraft {
    pub fn render(&self) -> String {
        let step = StepOutput {
            state_think: self.state_think.trim().to_string(),
            insight_block: self.insights.as_ref().map(|v| JsonBlock::<Vec<InsightDelta>>::parse(&pretty(v))),
            key_data_block: self.key_data.as_ref().map(|v| JsonBlock::<Vec<KeyDataEntry>>::parse(&pretty(v))),
            graph_block: self.graph.as_ref().map(|g| g.trim().to_string()),
            action_think: self.action_think.trim().to_string(),
            tool_call: self.tool_call.clone(),
            format_ok: true,
            block_diagnostics: Vec::new(),
        };
        render_step(&step)
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Semantic checks on key_data entries beyond JSON shape: structure names
/// must be canonical and references must point at an existing environment
/// observation (`obs:<step>`).
pub fn check_key_data(entries: &[KeyDataEntry], catalog: &Catalog, state: &AnalysisState) -> Vec<String> {
    let mut problems = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.description.trim().is_empty() {
            problems.push(format!("key_data[{i}]: empty description"));
        }
        for m in &e.structure.metrics {
            if catalog.metric(m).is_none() {
                problems.push(format!("key_data[{i}]: `{m}` is not a canonical metric"));
            }
        }
        for d in &e.structure.dimensions {
            if catalog.dimension(d).is_none() {
                problems.push(format!("key_data[{i}]: `{d}` is not a canonical dimension"));
            }
        }
        for f in &e.structure.filters {
            let col: String = f
                .trim()
                .chars()
                .take_while(|c| c.is_alphanumeric() || *c == '_')
                .collect();
            if catalog.dimension(&col).is_none() {
                problems.push(format!("key_data[{i}]: filter `{f}` does not start with a canonical dimension"));
            }
        }
        match parse_obs_ref(&e.payload_ref) {
            Some(step) => {
                let found = state
                    .observations
                    .iter()
                    .any(|o| o.source == EntrySource::Environment && o.step == step);
                if !found {
                    problems.push(format!("key_data[{i}]: no observation `{}`", e.payload_ref));
                }
            }
            None if e.kind == ObservationType::Csv => {
                problems.push(format!("key_data[{i}]: CSV entries must reference `obs:<step>`"));
            }
            None if e.payload_ref.trim().is_empty() => {
                problems.push(format!("key_data[{i}]: empty payload_ref"));
            }
            None => {}
        }
    }
    problems
}

/// Agent key_data entries as observation-log entries. Numerals are copied
/// from the referenced environment observation, so an agent cannot widen
/// its own grounding.
pub fn key_data_entries(entries: &[KeyDataEntry], state: &AnalysisState, step: u32) -> Vec<ObservationEntry> {
    entries
        .iter()
        .map(|e| {
            let numerals = parse_obs_ref(&e.payload_ref)
                .and_then(|s| {
                    state
                        .observations
                        .iter()
                        .find(|o| o.source == EntrySource::Environment && o.step == s)
                })
                .map(|o| o.numerals.clone())
                .unwrap_or_default();
            ObservationEntry {
                index: 0,
                step,
                source: EntrySource::Agent,
                kind: e.kind,
                description: e.description.clone(),
                structure: e.structure.clone(),
                payload_ref: e.payload_ref.clone(),
                numerals,
            }
        })
        .collect()
}

/// `obs:<step>` -> step.
pub fn parse_obs_ref(s: &str) -> Option<u32> {
    s.trim().strip_prefix("obs:")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::InsightStatus;

    const FULL: &str = r#"<state_think>
GMV is 45000.
</state_think>
<insight>
[{"title": "new users drove the drop", "status": "New", "proof": "share 0.8"}]
</insight>
<key_data>
[{"type": "CSV", "description": "gmv by level", "structure": {"metrics": ["netGMV"], "dimensions": ["userLevel"], "filters": []}, "payload_ref": "obs:0"}]
</key_data>
<graph>
graph TD
A[Q] --> B[Funnel]
</graph>
<action_think>
Query by channel next.
</action_think>
<tool_call>
{"tool": "python", "arguments": {"code": "print(1+1)"}}
</tool_call>"#;

    #[test]
    fn all_six_blocks() {
        let s = parse_step(FULL);
        assert!(s.format_ok, "{:?}", s.block_diagnostics);
        assert_eq!(s.state_think, "GMV is 45000.");
        assert_eq!(s.insights()[0].status, InsightStatus::New);
        assert_eq!(s.key_data()[0].structure.metrics, vec!["netGMV"]);
        let call = s.tool_call.as_ref().unwrap();
        assert!(call.schema_ok);
        assert_eq!(call.python_code(), Some("print(1+1)"));
        assert_eq!(parse_step(&render_step(&s)), s);
    }

    #[test]
    fn missing_tool_call() {
        let raw = "<state_think>a</state_think><action_think>b</action_think>";
        let s = parse_step(raw);
        assert!(!s.format_ok);
        assert!(s.block_diagnostics.iter().any(|d| d == "missing tool_call"));
    }

    #[test]
    fn nesting_and_unclosed() {
        let s = parse_step("<state_think>a<insight>[]</insight></state_think><action_think>b</action_think><tool_call>{}</tool_call>");
        assert!(!s.format_ok);
        let s = parse_step("<state_think>a</state_think><action_think>b</action_think><tool_call>{}");
        assert!(!s.format_ok);
        assert!(s.block_diagnostics.iter().any(|d| d.contains("unclosed")));
        let s = parse_step("<state_think>a<action_think></state_think>b</action_think><tool_call>{}</tool_call>");
        assert!(!s.format_ok);
    }

    #[test]
    fn order_duplicates_and_stray_text() {
        let s = parse_step("<action_think>b</action_think><state_think>a</state_think><tool_call>{}</tool_call>");
        assert!(s.block_diagnostics.iter().any(|d| d.contains("out of order")));
        let s = parse_step("<state_think>a</state_think><state_think>a</state_think><action_think>b</action_think><tool_call>{}</tool_call>");
        assert!(s.block_diagnostics.iter().any(|d| d.contains("duplicate")));
        let s = parse_step("hello <state_think>a</state_think><action_think>b</action_think><tool_call>{}</tool_call>");
        assert!(s.block_diagnostics.iter().any(|d| d.contains("stray")));
    }

    #[test]
    fn bad_payloads_keep_format() {
        let s = parse_step("<state_think>a</state_think><insight>[{]</insight><action_think>b</action_think><tool_call>{\"tool\": \"sql\"}</tool_call>");
        assert!(s.format_ok);
        assert!(s.insight_block.as_ref().unwrap().error.is_some());
        let call = s.tool_call.unwrap();
        assert!(!call.schema_ok && call.tool.is_none());
    }

    #[test]
    fn tool_call_schemas() {
        assert!(!ToolCall::parse(r#"{"tool": "python", "arguments": {"code": ""}}"#).schema_ok);
        assert!(!ToolCall::parse(r#"{"tool": "python", "arguments": {"code": "x", "env": 1}}"#).schema_ok);
        assert!(!ToolCall::parse(r#"{"tool": "dsl2data", "arguments": {"metric": []}}"#).schema_ok);
        let ok = ToolCall::parse(
            r#"{"tool": "dsl2data", "arguments": {"metric": ["netGMV"], "ds": ["20251001", "20251007"]}}"#,
        );
        assert!(ok.schema_ok, "{:?}", ok.error);
        assert_eq!(ok.dsl_query().unwrap().metric, vec!["netGMV"]);
    }

    #[test]
    fn draft_renders_well_formed() {
        let d = StepDraft {
            state_think: "s".into(),
            insights: Some(vec![InsightDelta {
                title: "t".into(),
                status: InsightStatus::New,
                proof: "p".into(),
            }]),
            graph: Some("graph TD\nA --> B".into()),
            action_think: "a".into(),
            tool_call: Some(ToolCall::python("print(2)")),
            ..Default::default()
        };
        let s = parse_step(&d.render());
        assert!(s.format_ok);
        assert_eq!(s.insights().len(), 1);
        assert!(s.tool_call.unwrap().schema_ok);
    }

    #[test]
    fn key_data_semantics() {
        let cat = Catalog::default_catalog();
        let state = AnalysisState::default();
        let s = parse_step(FULL);
        let problems = check_key_data(&s.key_data(), &cat, &state);
        assert_eq!(problems.len(), 1, "{problems:?}");
        assert!(problems[0].contains("obs:0"));
    }
}

//! Tool dispatch against a read-only warehouse and the script sandbox.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sandbox::{run_script, SandboxConfig, ScriptOutput};
use super::{Tool, ToolCall};
use crate::catalog::Violation;
use crate::dsl::{DslEngine, FeedbackPackage, Status};
use crate::numerals::{extract_numerals, json_numerals, GroundingIndex};
use crate::state::{EntrySource, ObservationEntry, ObservationType, Structure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationBody {
    Feedback(FeedbackPackage),
    Script(ScriptOutput),
    /// The call never reached a tool.
    Rejected { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tool: Option<Tool>,
    pub status: Status,
    pub body: ObservationBody,
    pub numerals: GroundingIndex,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl Observation {
    fn rejected(tool: Option<Tool>, message: String) -> Self {
        Self {
            tool,
            status: Status::Error,
            body: ObservationBody::Rejected { message },
            numerals: GroundingIndex::new(),
            violations: Vec::new(),
        }
    }

    pub fn boundary_violation(&self) -> bool {
        !self.violations.is_empty()
    }

    pub fn script(&self) -> Option<&ScriptOutput> {
        match &self.body {
            ObservationBody::Script(s) => Some(s),
            _ => None,
        }
    }

    pub fn feedback(&self) -> Option<&FeedbackPackage> {
        match &self.body {
            ObservationBody::Feedback(p) => Some(p),
            _ => None,
        }
    }

    /// The text handed back to the agent.
    pub fn render(&self) -> String {
        match &self.body {
            ObservationBody::Feedback(p) => p.to_json_pretty(),
            ObservationBody::Script(s) => {
                let mut out = format!("exit_ok: {}\n", s.exit_ok);
                if s.timed_out {
                    out.push_str("timed_out: true\n");
                }
                if s.truncated {
                    out.push_str("truncated: true\n");
                }
                out.push_str("--- stdout ---\n");
                out.push_str(&s.stdout);
                if !s.stderr.is_empty() {
                    out.push_str("\n--- stderr ---\n");
                    out.push_str(&s.stderr);
                }
                out
            }
            ObservationBody::Rejected { message } => format!("error: {message}"),
        }
    }

    /// Log entry for the state's observation list, referenced as
    /// `obs:<step>`.
    pub fn to_entry(&self, step: u32) -> ObservationEntry {
        let (kind, description, structure) = match &self.body {
            ObservationBody::Feedback(p) => {
                let q = &p.calibration_report.corrected_dsl;
                let filters = q
                    .filter
                    .as_ref()
                    .map(|f| {
                        f.leaves()
                            .into_iter()
                            .map(|c| {
                                let rule = serde_json::to_value(c.rule)
                                    .ok()
                                    .and_then(|v| v.as_str().map(str::to_string))
                                    .unwrap_or_default();
                                let params: Vec<String> = c.params.iter().map(|p| p.to_string()).collect();
                                format!("{} {} {}", c.column, rule, params.join(","))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                let mut desc = format!("dsl2data {}", q.metric.join(", "));
                if !q.dimension.is_empty() {
                    desc.push_str(&format!(" by {}", q.dimension.join(", ")));
                }
                desc.push_str(&format!(" over {}..{}", q.ds[0], q.ds[1]));
                (
                    ObservationType::Csv,
                    desc,
                    Structure {
                        metrics: q.metric.clone(),
                        dimensions: q.dimension.clone(),
                        filters,
                    },
                )
            }
            ObservationBody::Script(_) => (ObservationType::Txt, "python output".to_string(), Structure::default()),
            ObservationBody::Rejected { message } => {
                (ObservationType::Txt, format!("rejected call: {message}"), Structure::default())
            }
        };
        ObservationEntry {
            index: 0,
            step,
            source: EntrySource::Environment,
            kind,
            description,
            structure,
            payload_ref: format!("obs:{step}"),
            numerals: self.numerals.clone(),
        }
    }
}

/// Catalog, warehouse and sandbox settings shared by every episode.
#[derive(Clone)]
pub struct Environment {
    engine: Arc<DslEngine>,
    sandbox: SandboxConfig,
}

impl Environment {
    pub fn new(engine: Arc<DslEngine>, sandbox: SandboxConfig) -> Self {
        Self { engine, sandbox }
    }

    pub fn engine(&self) -> &DslEngine {
        &self.engine
    }

    pub fn sandbox(&self) -> &SandboxConfig {
        &self.sandbox
    }

    pub fn execute_action(&self, call: &ToolCall) -> Observation {
        if !call.schema_ok {
            let msg = call.error.clone().unwrap_or_else(|| "malformed tool call".into());
            return Observation::rejected(call.tool, msg);
        }
        if let Some(query) = call.dsl_query() {
            let outcome = self.engine.run(&query);
            let pkg = outcome.package;
            let mut values = Vec::new();
            if pkg.status == Status::Success {
                for row in &pkg.execution_results.preview {
                    for v in row.values() {
                        json_numerals(v, &mut values);
                    }
                }
            }
            return Observation {
                tool: Some(Tool::Dsl2Data),
                status: pkg.status,
                numerals: GroundingIndex::from_values(values),
                violations: pkg.calibration_report.violations.clone(),
                body: ObservationBody::Feedback(pkg),
            };
        }
        if let Some(code) = call.python_code() {
            return match run_script(code, &self.sandbox) {
                Ok(out) => Observation {
                    tool: Some(Tool::Python),
                    status: match (out.exit_ok, out.timed_out) {
                        (_, true) => Status::Timeout,
                        (true, false) => Status::Success,
                        (false, false) => Status::Error,
                    },
                    numerals: GroundingIndex::from_values(extract_numerals(&out.stdout).into_iter().map(|n| n.value)),
                    body: ObservationBody::Script(out),
                    violations: Vec::new(),
                },
                Err(e) => Observation::rejected(Some(Tool::Python), format!("could not start the interpreter: {e}")),
            };
        }
        Observation::rejected(call.tool, "tool call has no executable payload".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::warehouse::{generate, WarehouseConfig};

    fn env() -> (tempfile::TempDir, Environment) {
        let dir = tempfile::tempdir().unwrap();
        let (wh, _) = generate(&WarehouseConfig::small(3), &dir.path().join("wh.db")).unwrap();
        let engine = DslEngine::new(Arc::new(Catalog::default_catalog()), Arc::new(wh));
        (dir, Environment::new(Arc::new(engine), SandboxConfig::default()))
    }

    #[test]
    fn dsl_and_python() {
        let (_d, env) = env();
        let call = ToolCall::parse(
            r#"{"tool": "dsl2data", "arguments": {"metric": ["netGMV", "netAov"], "dimension": ["isWeek"], "ds": ["20250915", "20251012"]}}"#,
        );
        let obs = env.execute_action(&call);
        assert_eq!(obs.status, Status::Success);
        let pkg = obs.feedback().unwrap();
        let mut values = Vec::new();
        for row in &pkg.execution_results.preview {
            for v in row.values() {
                json_numerals(v, &mut values);
            }
        }
        assert!(!values.is_empty());
        assert!(obs.numerals.is_superset(&GroundingIndex::from_values(values)));
        assert_eq!(obs.to_entry(0).structure.dimensions, vec!["isWeek"]);

        let obs = env.execute_action(&ToolCall::python("print(1+1)"));
        assert_eq!(obs.script().unwrap().stdout.trim(), "2");
        assert!(obs.script().unwrap().exit_ok);
        assert_eq!(obs.numerals.values().collect::<Vec<_>>(), vec![2.0]);
    }

    #[test]
    fn unknown_metric_is_a_boundary_violation() {
        let (_d, env) = env();
        let call = ToolCall::parse(r#"{"tool": "dsl2data", "arguments": {"metric": ["happiness"], "ds": ["20250915", "20250920"]}}"#);
        let obs = env.execute_action(&call);
        assert_eq!(obs.status, Status::Error);
        assert!(obs.boundary_violation());
    }

    #[test]
    fn launch_failure_is_an_error_observation() {
        let (_d, env) = env();
        let env = Environment::new(
            env.engine.clone(),
            SandboxConfig {
                python: "/no/such/python".into(),
                ..Default::default()
            },
        );
        let obs = env.execute_action(&ToolCall::python("print(1)"));
        assert_eq!(obs.status, Status::Error);
        assert!(matches!(obs.body, ObservationBody::Rejected { .. }));
    }
}

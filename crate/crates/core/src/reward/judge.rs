//! Insight validity judges: a rule-based one over planted ground truth and
//! a client for a chat-completion endpoint.

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::state::{InsightDelta, InsightStatus};
use crate::warehouse::GroundTruth;

/// Prompt template with `{question}`, `{insight}`, `{action}` and `{obs}`
/// placeholders. The first `{insight}` receives the previous insights, the
/// second the candidate.
pub const JUDGE_TEMPLATE: &str = include_str!("../../data/judge_prompt.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub valid: bool,
    pub rationale: String,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge request failed: {0}")]
    Transport(String),
    #[error("judge reply has no verdict: {0}")]
    Unparseable(String),
}

/// Everything a judge sees for one candidate insight.
#[derive(Debug, Clone, Serialize)]
pub struct JudgeRequest<'a> {
    pub question: &'a str,
    pub previous: &'a [InsightDelta],
    pub action: &'a str,
    pub observation: &'a str,
    pub candidate: &'a InsightDelta,
}

pub trait JudgeClient: Send + Sync {
    fn judge(&self, req: &JudgeRequest<'_>) -> Result<JudgeVerdict, JudgeError>;

    fn render_prompt(&self, req: &JudgeRequest<'_>) -> String {
        render_judge_prompt(JUDGE_TEMPLATE, req)
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{(question|insight|action|obs)\}").expect("placeholder regex"))
}

fn insight_json(d: &InsightDelta) -> String {
    serde_json::to_string(d).expect("insight serializes")
}

/// Single-pass substitution, so placeholder-like text inside the inputs is
/// left alone.
pub fn render_judge_prompt(template: &str, req: &JudgeRequest<'_>) -> String {
    let previous = if req.previous.is_empty() {
        "None".to_string()
    } else {
        req.previous.iter().map(insight_json).collect::<Vec<_>>().join("\n")
    };
    let mut insight_seen = 0;
    let mut out = String::with_capacity(template.len() + 512);
    let mut last = 0;
    for m in placeholder_re().captures_iter(template) {
        let whole = m.get(0).expect("match");
        out.push_str(&template[last..whole.start()]);
        match &m[1] {
            "question" => out.push_str(req.question),
            "action" => out.push_str(req.action),
            "obs" => out.push_str(req.observation),
            _ => {
                insight_seen += 1;
                if insight_seen == 1 {
                    out.push_str(&previous);
                } else {
                    out.push_str(&insight_json(req.candidate));
                }
            }
        }
        last = whole.end();
    }
    out.push_str(&template[last..]);
    out
}

/// Reads the verdict from a `Final Answer:` line, falling back to the last
/// standalone Valid/Invalid in the reply.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b(invalid|valid)\b").expect("verdict regex"));
    let tail = match reply.rfind("Final Answer:") {
        Some(i) => &reply[i..],
        None => reply,
    };
    re.find_iter(tail)
        .last()
        .map(|m| m.as_str().eq_ignore_ascii_case("valid"))
}

/// Share thresholds for the rule-based judge.
pub const DOMINANT_SHARE: f64 = 0.5;
pub const MINOR_SHARE: f64 = 0.1;

/// Judges against planted causes. An insight names a cause when its text
/// mentions both the dimension and the segment. New and Reinforced claims
/// are valid when the named cause holds at least half of the effect;
/// Refuted claims are valid when the refuted cause is minor.
#[derive(Debug, Clone)]
pub struct MockJudge {
    truths: Vec<GroundTruth>,
}

impl MockJudge {
    pub fn new(truths: Vec<GroundTruth>) -> Self {
        Self { truths }
    }

    /// Largest share among the causes the text names.
    pub fn named_share(&self, text: &str) -> Option<f64> {
        let lower = text.to_lowercase();
        let mut best: Option<f64> = None;
        for c in self.truths.iter().flat_map(|t| &t.planted_causes) {
            if !lower.contains(&c.dimension.to_lowercase()) {
                continue;
            }
            let seg = Regex::new(&format!(r"(?i)(^|[^A-Za-z0-9_]){}($|[^A-Za-z0-9_])", regex::escape(&c.segment)))
                .expect("escaped segment");
            if seg.is_match(text) {
                best = Some(best.map_or(c.share_of_effect, |b: f64| b.max(c.share_of_effect)));
            }
        }
        best
    }
}

impl JudgeClient for MockJudge {
    fn judge(&self, req: &JudgeRequest<'_>) -> Result<JudgeVerdict, JudgeError> {
        let c = req.candidate;
        let verdict = |valid: bool, why: &str| {
            Ok(JudgeVerdict {
                valid,
                rationale: why.to_string(),
            })
        };
        if c.proof.trim().is_empty() {
            return verdict(false, "no supporting proof");
        }
        if c.status == InsightStatus::New && req.previous.iter().any(|p| p.title == c.title) {
            return verdict(false, "redundant with a previous insight");
        }
        let text = format!("{}\n{}", c.title, c.proof);
        let Some(share) = self.named_share(&text) else {
            return verdict(false, "does not name a key factor");
        };
        if c.status == InsightStatus::Refuted {
            if share <= MINOR_SHARE {
                verdict(true, &format!("refutes a minor factor (share {share:.2})"))
            } else {
                verdict(false, &format!("refutes a factor with share {share:.2}"))
            }
        } else if share >= DOMINANT_SHARE {
            verdict(true, &format!("names the dominant factor (share {share:.2})"))
        } else {
            verdict(false, &format!("named factor holds only {share:.2} of the effect"))
        }
    }
}

/// Chat-completion client. Sends the rendered prompt as a single user
/// message and reads the verdict from the reply.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub template: String,
}

impl RemoteJudge {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            template: JUDGE_TEMPLATE.to_string(),
        }
    }

    /// Configured by `AIDA_JUDGE_ENDPOINT`, `AIDA_JUDGE_MODEL` and
    /// `AIDA_JUDGE_API_KEY`; `None` without an endpoint.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("AIDA_JUDGE_ENDPOINT").ok().filter(|s| !s.is_empty())?;
        let model = std::env::var("AIDA_JUDGE_MODEL").unwrap_or_else(|_| "judge".into());
        let mut j = Self::new(endpoint, model);
        j.api_key = std::env::var("AIDA_JUDGE_API_KEY").ok().filter(|s| !s.is_empty());
        Some(j)
    }
}

impl JudgeClient for RemoteJudge {
    fn judge(&self, req: &JudgeRequest<'_>) -> Result<JudgeVerdict, JudgeError> {
        let prompt = self.render_prompt(req);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let reply: Value = request
            .send_json(&body)
            .map_err(|e| JudgeError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let text = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| JudgeError::Unparseable(reply.to_string()))?;
        let valid = parse_verdict(text).ok_or_else(|| JudgeError::Unparseable(text.to_string()))?;
        Ok(JudgeVerdict {
            valid,
            rationale: text.to_string(),
        })
    }

    fn render_prompt(&self, req: &JudgeRequest<'_>) -> String {
        render_judge_prompt(&self.template, req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warehouse::{Direction, PlantedCause};

    fn truth() -> GroundTruth {
        let cause = |seg: &str, share: f64| PlantedCause {
            metric: "netGMV".into(),
            dimension: "userLevel".into(),
            segment: seg.into(),
            direction: Direction::Down,
            share_of_effect: share,
        };
        GroundTruth {
            scenario_id: "S1".into(),
            planted_causes: vec![cause("new", 0.8), cause("regular", 0.15), cause("vip", 0.05)],
        }
    }

    fn delta(title: &str, status: InsightStatus, proof: &str) -> InsightDelta {
        InsightDelta {
            title: title.into(),
            status,
            proof: proof.into(),
        }
    }

    fn ask(j: &MockJudge, d: &InsightDelta, prev: &[InsightDelta]) -> bool {
        j.judge(&JudgeRequest {
            question: "why",
            previous: prev,
            action: "",
            observation: "",
            candidate: d,
        })
        .unwrap()
        .valid
    }

    #[test]
    fn pareto_rule() {
        let j = MockJudge::new(vec![truth()]);
        assert!(ask(&j, &delta("userLevel new drives the drop", InsightStatus::New, "80%"), &[]));
        assert!(!ask(&j, &delta("userLevel vip drives the drop", InsightStatus::New, "5%"), &[]));
        assert!(!ask(&j, &delta("userLevel regular drives it", InsightStatus::New, "15%"), &[]));
        assert!(!ask(&j, &delta("something changed", InsightStatus::New, "x"), &[]));
        assert!(!ask(&j, &delta("userLevel new", InsightStatus::New, ""), &[]));
        assert!(ask(&j, &delta("userLevel vip drives it", InsightStatus::Refuted, "only 5%"), &[]));
        let prev = [delta("userLevel new drives the drop", InsightStatus::New, "80%")];
        assert!(!ask(&j, &prev[0], &prev));
        // "newcomer" is not the segment "new".
        assert_eq!(j.named_share("userLevel newcomer"), None);
    }

    #[test]
    fn prompt_placeholders() {
        let prev = [delta("a", InsightStatus::New, "p")];
        let cand = delta("b {obs}", InsightStatus::Reinforced, "q");
        let req = JudgeRequest {
            question: "Q?",
            previous: &prev,
            action: "ACT",
            observation: "OBS",
            candidate: &cand,
        };
        let text = MockJudge::new(vec![]).render_prompt(&req);
        assert!(text.contains("- Target Question: Q?"));
        assert!(text.contains("- Previous Key Sub-insight: {\"title\":\"a\""));
        assert!(text.contains("- Updated Sub-insight (to be evaluated): {\"title\":\"b {obs}\""));
        assert!(text.contains("- Current Environment Observation: OBS"));
        assert!(text.contains("# Core Principles (Pareto Principle / 80-20 Rule)"));
        assert!(text.contains("**Strictly evaluate the validity of the sub-insight**"));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("Thought: fine.\nFinal Answer: Valid"), Some(true));
        assert_eq!(parse_verdict("Thought: not valid at all.\nFinal Answer: Invalid"), Some(false));
        assert_eq!(parse_verdict("no idea"), None);
    }

    #[test]
    fn unreachable_endpoint_is_an_error() {
        let mut j = RemoteJudge::new("http://127.0.0.1:9/v1/chat/completions", "m");
        j.timeout = Duration::from_millis(500);
        let d = delta("x", InsightStatus::New, "p");
        let r = j.judge(&JudgeRequest {
            question: "",
            previous: &[],
            action: "",
            observation: "",
            candidate: &d,
        });
        assert!(r.is_err());
    }
}

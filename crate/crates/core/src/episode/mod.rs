//! Closed-loop episodes: policy turn, tool call, state merge, reward, log.
//!
//! A log directory holds `episode.json`, `steps.jsonl` (one record per
//! turn), `states/step_NNN.json` (state after each turn),
//! `final_state.json`, `report.txt`, and `data/` with query exports that
//! scripts can read as `data/exports/...`.

pub mod policy;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError};
use crate::dsl::DslEngine;
use crate::reward::{
    score_step, step_update, JudgeClient, JudgeContext, MockJudge, RemoteJudge, RewardBreakdown, RewardDetail,
    RewardParams, StepContext, StepScore,
};
use crate::state::AnalysisState;
use crate::step::{parse_step, Environment, Observation, SandboxConfig, StepOutput, ToolCall};
use crate::warehouse::{Direction, GroundTruth, Scenario, TargetKind, WarehouseError, WarehouseHandle};

pub use policy::{ExplorerPlan, ExplorerPolicy, Policy, ReplayPolicy};
pub use report::render_report;

pub const DEFAULT_MAX_STEPS: u32 = 10;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Warehouse(#[from] WarehouseError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Replay {
        file: PathBuf,
    },
    Explorer {
        #[serde(default)]
        seed: u64,
        /// Send one out-of-catalog query early in the episode.
        #[serde(default)]
        probe: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeConfig {
    #[default]
    Mock,
    Remote {
        endpoint: String,
        #[serde(default)]
        model: Option<String>,
    },
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

fn default_budget_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Catalog TOML; the bundled catalog when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    pub warehouse: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    /// Defaults to a question derived from the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub id: BTreeMap<String, String>,
    pub policy: PolicyConfig,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default = "default_budget_ms")]
    pub budget_ms: u64,
}

impl EpisodeConfig {
    pub fn new(warehouse: impl Into<PathBuf>, policy: PolicyConfig) -> Self {
        Self {
            catalog: None,
            warehouse: warehouse.into(),
            scenario_id: None,
            question: None,
            id: BTreeMap::new(),
            policy,
            max_steps: DEFAULT_MAX_STEPS,
            judge: JudgeConfig::Mock,
            budget_ms: default_budget_ms(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EpisodeError> {
        toml::from_str(text).map_err(|e| EpisodeError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.max_steps == 0 {
            return Err(EpisodeError::Config("max_steps must be at least 1".into()));
        }
        match &self.policy {
            PolicyConfig::Replay { file } if !file.is_file() => {
                return Err(EpisodeError::Config(format!("replay file {} does not exist", file.display())))
            }
            PolicyConfig::Explorer { .. } if self.scenario_id.is_none() => {
                return Err(EpisodeError::Config("the explorer policy needs a scenario_id".into()))
            }
            _ => {}
        }
        if self.budget_ms == 0 {
            return Err(EpisodeError::Config("budget_ms must be positive".into()));
        }
        Ok(())
    }

    /// Resolves relative paths against `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.warehouse);
        if let Some(c) = self.catalog.as_mut() {
            fix(c);
        }
        if let PolicyConfig::Replay { file } = &mut self.policy {
            fix(file);
        }
        self
    }
}

/// Default question for a scenario.
pub fn scenario_question(s: &Scenario) -> String {
    let change = match s.effect.direction() {
        Direction::Down => "drop",
        Direction::Up => "rise",
    };
    let kind = match s.target.kind {
        TargetKind::Shop => "shop",
        TargetKind::Brand => "brand",
        TargetKind::District => "district",
    };
    format!(
        "Why did {} {change} for {kind} {} between {} and {} compared with the previous week?",
        s.effect.metric(),
        s.target.value,
        s.window[0],
        s.window[1]
    )
}

fn scenario_id_map(s: &Scenario) -> BTreeMap<String, String> {
    let key = match s.target.kind {
        TargetKind::Shop => "shop",
        TargetKind::Brand => "brand",
        TargetKind::District => "district",
    };
    BTreeMap::from([(key.to_string(), s.target.value.clone())])
}

/// One turn as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub raw_output: String,
    pub parsed: StepOutput,
    pub tool_call: Option<ToolCall>,
    pub observation: Option<Observation>,
    pub reward_breakdown: Option<RewardBreakdown>,
    #[serde(default)]
    pub reward_detail: Option<RewardDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario_id: Option<String>,
    pub question: String,
    pub id: BTreeMap<String, String>,
    pub policy: PolicyConfig,
    pub judge: JudgeConfig,
    pub max_steps: u32,
    pub budget_ms: u64,
    pub steps_run: u32,
    pub intermediate_total: f64,
    pub accumulated_total: f64,
    pub valid_insights: Vec<String>,
    pub invalid_insights: Vec<String>,
    pub judge_failures: u32,
    pub boundary_violations: u32,
}

/// Catalog and warehouse shared by concurrent episodes.
#[derive(Clone)]
pub struct Resources {
    pub catalog: Arc<Catalog>,
    pub warehouse: Arc<WarehouseHandle>,
}

impl Resources {
    pub fn open(config: &EpisodeConfig) -> Result<Self, EpisodeError> {
        let catalog = match &config.catalog {
            Some(p) => Catalog::load(p)?,
            None => Catalog::default_catalog(),
        };
        Ok(Self {
            catalog: Arc::new(catalog),
            warehouse: Arc::new(WarehouseHandle::open(&config.warehouse)?),
        })
    }
}

/// Applies one parsed turn to `state`: scores it, then merges its insight,
/// key_data and graph blocks plus the environment observation.
pub fn fold_step(
    state: &AnalysisState,
    parsed: &StepOutput,
    observation: Option<&Observation>,
    catalog: &Catalog,
    judge: &dyn JudgeClient,
    judge_context: JudgeContext<'_>,
    params: &RewardParams,
) -> (StepScore, AnalysisState, Option<String>) {
    let ctx = StepContext {
        prev_state: state,
        catalog,
        observation,
        judge,
        judge_context,
        params,
    };
    let score = score_step(parsed, &ctx);
    let (mut update, _) = step_update(parsed, &ctx);
    if let Some(o) = observation {
        update.observation_appends.push(o.to_entry(state.step_index));
    }
    match state.apply_update(&update) {
        Ok(next) => (score, next.next_step(), None),
        Err(e) => (score, state.clone().next_step(), Some(e.to_string())),
    }
}

fn judge_for(config: &EpisodeConfig, warehouse: &WarehouseHandle) -> Result<Box<dyn JudgeClient>, EpisodeError> {
    Ok(match &config.judge {
        JudgeConfig::Mock => {
            let truths: Vec<GroundTruth> = match &config.scenario_id {
                Some(id) => vec![warehouse.ground_truth(id)?],
                None => Vec::new(),
            };
            Box::new(MockJudge::new(truths))
        }
        JudgeConfig::Remote { endpoint, model } => {
            let mut j = RemoteJudge::new(endpoint.clone(), model.clone().unwrap_or_else(|| "judge".into()));
            j.api_key = std::env::var("AIDA_JUDGE_API_KEY").ok().filter(|s| !s.is_empty());
            Box::new(j)
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EpisodeError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EpisodeError::Log(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn run_episode(config: &EpisodeConfig, out_dir: &Path, sandbox: SandboxConfig) -> Result<EpisodeSummary, EpisodeError> {
    config.validate()?;
    let res = Resources::open(config)?;
    run_episode_with(&res, config, out_dir, sandbox)
}

/// Runs one episode into `out_dir`. Config problems fail before the first
/// turn; tool failures are logged and the episode continues.
pub fn run_episode_with(
    res: &Resources,
    config: &EpisodeConfig,
    out_dir: &Path,
    mut sandbox: SandboxConfig,
) -> Result<EpisodeSummary, EpisodeError> {
    config.validate()?;
    let scenario = config
        .scenario_id
        .as_deref()
        .map(|id| res.warehouse.scenario(id))
        .transpose()?;
    let question = match (&config.question, &scenario) {
        (Some(q), _) => q.clone(),
        (None, Some(s)) => scenario_question(s),
        (None, None) => return Err(EpisodeError::Config("a question or scenario_id is required".into())),
    };
    let id = match (&scenario, config.id.is_empty()) {
        (Some(s), true) => scenario_id_map(s),
        _ => config.id.clone(),
    };
    let mut policy: Box<dyn Policy> = match &config.policy {
        PolicyConfig::Replay { file } => Box::new(ReplayPolicy::from_file(file)?),
        PolicyConfig::Explorer { seed, probe } => {
            let s = scenario.as_ref().expect("validated");
            Box::new(ExplorerPolicy::new(ExplorerPlan::for_scenario(s, &res.catalog, *seed), *probe))
        }
    };
    let judge = judge_for(config, &res.warehouse)?;

    fs::create_dir_all(out_dir.join("states"))?;
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir)?;
    sandbox.data_dir = Some(data_dir.clone());
    let engine = DslEngine::new(res.catalog.clone(), res.warehouse.clone())
        .with_budget(Duration::from_millis(config.budget_ms))
        .with_exports(&data_dir, true);
    let env = Environment::new(Arc::new(engine), sandbox);
    let params = RewardParams::default();

    let mut state = AnalysisState::new(id.clone(), question.clone());
    let mut last_obs: Option<Observation> = None;
    let mut prev_action = String::new();
    let mut records = Vec::new();
    for t in 0..config.max_steps {
        let Some(raw) = policy.next_step(&state, last_obs.as_ref()) else {
            break;
        };
        let parsed = parse_step(&raw);
        let observation = parsed.tool_call.as_ref().map(|c| env.execute_action(c));
        let prev_obs_text = last_obs.as_ref().map(Observation::render).unwrap_or_default();
        let jctx = JudgeContext {
            question: &question,
            action: &prev_action,
            observation: &prev_obs_text,
        };
        let (score, next, state_error) =
            fold_step(&state, &parsed, observation.as_ref(), &res.catalog, judge.as_ref(), jctx, &params);
        write_json(&out_dir.join("states").join(format!("step_{t:03}.json")), &next)?;
        prev_action = parsed.tool_call.as_ref().map(|c| c.raw.clone()).unwrap_or_default();
        records.push(StepRecord {
            step_index: t,
            raw_output: raw,
            tool_call: parsed.tool_call.clone(),
            parsed,
            observation: observation.clone(),
            reward_breakdown: Some(score.breakdown),
            reward_detail: Some(score.detail),
            state_error,
        });
        state = next;
        last_obs = observation;
    }
    write_steps(&out_dir.join("steps.jsonl"), &records)?;
    write_json(&out_dir.join("final_state.json"), &state)?;
    let summary = summarize(config, question, id, &records);
    fs::write(out_dir.join("report.txt"), render_report(&state, &records))?;
    write_json(&out_dir.join("episode.json"), &summary)?;
    Ok(summary)
}

fn summarize(
    config: &EpisodeConfig,
    question: String,
    id: BTreeMap<String, String>,
    records: &[StepRecord],
) -> EpisodeSummary {
    let mut s = EpisodeSummary {
        scenario_id: config.scenario_id.clone(),
        question,
        id,
        policy: config.policy.clone(),
        judge: config.judge.clone(),
        max_steps: config.max_steps,
        budget_ms: config.budget_ms,
        steps_run: records.len() as u32,
        intermediate_total: 0.0,
        accumulated_total: 0.0,
        valid_insights: Vec::new(),
        invalid_insights: Vec::new(),
        judge_failures: 0,
        boundary_violations: 0,
    };
    for r in records {
        if let Some(b) = &r.reward_breakdown {
            s.intermediate_total += b.intermediate_total;
            s.accumulated_total += b.accumulated_total;
        }
        if let Some(d) = &r.reward_detail {
            s.judge_failures += d.gain.judge_failed as u32;
            for j in &d.gain.details {
                if j.valid {
                    s.valid_insights.push(j.title.clone());
                } else {
                    s.invalid_insights.push(j.title.clone());
                }
            }
        }
        s.boundary_violations += r.observation.as_ref().is_some_and(|o| o.boundary_violation()) as u32;
    }
    s
}

/// Runs configs on up to `parallel` threads; episode `i` logs into
/// `out_root/episode_NNN`.
pub fn run_episodes(
    configs: &[EpisodeConfig],
    out_root: &Path,
    sandbox: &SandboxConfig,
    parallel: usize,
) -> Vec<Result<EpisodeSummary, EpisodeError>> {
    let parallel = parallel.max(1);
    // Episodes over the same warehouse share one handle.
    let mut shared: Vec<((PathBuf, Option<PathBuf>), Result<Resources, String>)> = Vec::new();
    for c in configs {
        let key = (c.warehouse.clone(), c.catalog.clone());
        if !shared.iter().any(|(k, _)| *k == key) {
            shared.push((key, Resources::open(c).map_err(|e| e.to_string())));
        }
    }
    let resources_for = |c: &EpisodeConfig| {
        let key = (c.warehouse.clone(), c.catalog.clone());
        shared.iter().find(|(k, _)| *k == key).map(|(_, r)| r.clone()).expect("opened above")
    };
    let mut results: Vec<Option<Result<EpisodeSummary, EpisodeError>>> = (0..configs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let dir = out_root.join(format!("episode_{i:03}"));
                let r = match resources_for(&configs[i]) {
                    Ok(res) => run_episode_with(&res, &configs[i], &dir, sandbox.clone()),
                    Err(e) => Err(EpisodeError::Config(e)),
                };
                slots.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every episode ran")).collect()
}

pub fn write_steps(path: &Path, records: &[StepRecord]) -> Result<(), EpisodeError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| EpisodeError::Log(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>, EpisodeError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EpisodeError::Log(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// A log directory read back.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub dir: PathBuf,
    pub summary: EpisodeSummary,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn load(dir: &Path) -> Result<Self, EpisodeError> {
        let summary_text = fs::read_to_string(dir.join("episode.json"))?;
        let summary = serde_json::from_str(&summary_text).map_err(|e| EpisodeError::Log(format!("episode.json: {e}")))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            summary,
            steps: read_steps(&dir.join("steps.jsonl"))?,
        })
    }
}

/// Re-scores a logged episode from its raw outputs and recorded
/// observations, without re-running any tool.
pub fn rescore(
    log: &EpisodeLog,
    catalog: &Catalog,
    judge: &dyn JudgeClient,
    params: &RewardParams,
) -> Vec<StepScore> {
    let mut state = AnalysisState::new(log.summary.id.clone(), log.summary.question.clone());
    let mut prev_action = String::new();
    let mut prev_obs = String::new();
    let mut out = Vec::with_capacity(log.steps.len());
    for r in &log.steps {
        let parsed = parse_step(&r.raw_output);
        let jctx = JudgeContext {
            question: &log.summary.question,
            action: &prev_action,
            observation: &prev_obs,
        };
        let (score, next, _) = fold_step(&state, &parsed, r.observation.as_ref(), catalog, judge, jctx, params);
        out.push(score);
        state = next;
        prev_action = parsed.tool_call.as_ref().map(|c| c.raw.clone()).unwrap_or_default();
        prev_obs = r.observation.as_ref().map(Observation::render).unwrap_or_default();
    }
    out
}

/// Judge for re-scoring a log: the mock judge over the scenario's ground
/// truth from `warehouse`.
pub fn mock_judge_for(log: &EpisodeLog, warehouse: &WarehouseHandle) -> Result<MockJudge, EpisodeError> {
    let truths = match &log.summary.scenario_id {
        Some(id) => vec![warehouse.ground_truth(id)?],
        None => Vec::new(),
    };
    Ok(MockJudge::new(truths))
}

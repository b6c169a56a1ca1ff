//! Command-line front end. Every relative path is taken against the
//! workspace directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::catalog::Catalog;
use crate::dsl::{DslEngine, Status};
use crate::episode::{mock_judge_for, rescore, run_episodes, EpisodeConfig, EpisodeLog};
use crate::eval::{
    exploration_profile, filter_trajectories, query_touches, score_trajectory, write_exploration_csv,
    write_filter_report, write_score_csv, write_violations_csv, Trajectory, DEFAULT_ALPHA,
};
use crate::reward::RewardParams;
use crate::step::SandboxConfig;
use crate::warehouse::{generate, WarehouseConfig, WarehouseHandle};

#[derive(Debug, Parser)]
#[command(name = "aida", version, about = "Insight-discovery environment over a synthetic retail warehouse")]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, env = "AIDA_WORKSPACE", default_value = ".")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a catalog and print a summary.
    CatalogLint {
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Generate a seeded warehouse, optionally exporting every table as CSV.
    GenData(GenData),
    /// Run one DSL request and print the feedback package.
    Query(QueryArgs),
    /// Run one or more episodes from TOML configs.
    RunEpisode {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-score a logged episode with the mock judge.
    Reward {
        log: PathBuf,
        #[arg(long, default_value = "warehouse.db")]
        warehouse: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write score.csv for one or more logs.
    Score {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write exploration.csv, violations.csv and filter.json for logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Overrides the seed of `--config`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Warehouse config TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the small test-sized configuration.
    #[arg(long)]
    pub small: bool,
    #[arg(long, default_value = "warehouse.db")]
    pub out: PathBuf,
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long, conflicts_with = "payload", required_unless_present = "payload")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub payload: Option<String>,
    #[arg(long, default_value = "warehouse.db")]
    pub warehouse: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 60_000)]
    pub budget_ms: u64,
    /// Directory for `save_data_path` exports.
    #[arg(long, default_value = "exports")]
    pub export_dir: PathBuf,
}

/// A config file holds either one episode or an `[[episode]]` list.
#[derive(Deserialize)]
#[serde(untagged)]
enum EpisodeFile {
    Many { episode: Vec<EpisodeConfig> },
    One(Box<EpisodeConfig>),
}

struct Workspace(PathBuf);

impl Workspace {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }

    fn catalog(&self, p: Option<&PathBuf>) -> Result<Catalog> {
        match p {
            Some(p) => {
                let p = self.path(p);
                Catalog::load(&p).with_context(|| format!("loading catalog {}", p.display()))
            }
            None => Ok(Catalog::default_catalog()),
        }
    }

    fn warehouse(&self, p: &Path) -> Result<WarehouseHandle> {
        let p = self.path(p);
        WarehouseHandle::open(&p).with_context(|| format!("opening warehouse {}", p.display()))
    }

    fn logs(&self, dirs: &[PathBuf]) -> Result<Vec<EpisodeLog>> {
        dirs.iter()
            .map(|d| {
                let d = self.path(d);
                EpisodeLog::load(&d).with_context(|| format!("reading log {}", d.display()))
            })
            .collect()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ws = Workspace(cli.workspace);
    match cli.command {
        Command::CatalogLint { catalog } => catalog_lint(&ws, catalog.as_ref()),
        Command::GenData(a) => gen_data(&ws, a),
        Command::Query(a) => query(&ws, a),
        Command::RunEpisode { configs, out, parallel } => run_episode(&ws, &configs, &out, parallel),
        Command::Reward {
            log,
            warehouse,
            catalog,
            out,
        } => reward(&ws, &log, &warehouse, catalog.as_ref(), out.as_ref()),
        Command::Score { logs, alpha, out } => score(&ws, &logs, alpha, &out),
        Command::Report { logs, catalog, out } => report(&ws, &logs, catalog.as_ref(), &out),
    }
}

fn catalog_lint(ws: &Workspace, path: Option<&PathBuf>) -> Result<()> {
    let cat = ws.catalog(path)?;
    println!("metrics: {}", cat.metrics().len());
    for (theme, ms) in cat.metrics_by_theme() {
        println!("  {}: {}", theme.as_str(), ms.len());
    }
    println!("dimensions: {}", cat.dimensions().len());
    println!("aliases: {}", cat.aliases().len());
    println!("incompatible pairs: {}", cat.compatibility().incompatible_pairs.len());
    Ok(())
}

fn gen_data(ws: &Workspace, a: GenData) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let p = ws.path(p);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            WarehouseConfig::from_toml_str(&text)?
        }
        None if a.small => WarehouseConfig::small(42),
        None => WarehouseConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let out = ws.path(&a.out);
    let (handle, truths) = generate(&config, &out)?;
    if let Some(dir) = &a.export {
        let files = handle.export_csv(&ws.path(dir))?;
        eprintln!("exported {} tables", files.len());
    }
    println!("{}", serde_json::to_string_pretty(&truths)?);
    Ok(())
}

fn query(ws: &Workspace, a: QueryArgs) -> Result<()> {
    let payload = match (&a.file, &a.payload) {
        (Some(f), _) => {
            let f = ws.path(f);
            fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?
        }
        (None, Some(p)) => p.clone(),
        (None, None) => bail!("either --file or --payload is required"),
    };
    let engine = DslEngine::new(Arc::new(ws.catalog(a.catalog.as_ref())?), Arc::new(ws.warehouse(&a.warehouse)?))
        .with_budget(Duration::from_millis(a.budget_ms))
        .with_exports(ws.path(&a.export_dir), false);
    let outcome = engine.run_payload(&payload)?;
    println!("{}", outcome.package.to_json_pretty());
    match outcome.package.status {
        Status::Success => Ok(()),
        s => bail!("query finished with status {s:?}"),
    }
}

fn run_episode(ws: &Workspace, configs: &[PathBuf], out: &Path, parallel: usize) -> Result<()> {
    let mut all = Vec::new();
    for c in configs {
        let p = ws.path(c);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let file: EpisodeFile = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        // Paths inside a config are relative to the workspace, not the file.
        let list = match file {
            EpisodeFile::Many { episode } => episode,
            EpisodeFile::One(one) => vec![*one],
        };
        all.extend(list.into_iter().map(|e| e.rooted(&ws.0)));
    }
    for (i, c) in all.iter().enumerate() {
        c.validate().with_context(|| format!("episode {i}"))?;
    }
    let out = ws.path(out);
    let results = run_episodes(&all, &out, &SandboxConfig::from_env(), parallel);
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(s) => println!("{}", serde_json::to_string(s)?),
            Err(e) => {
                failed += 1;
                eprintln!("episode {i}: {e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} episodes failed", results.len());
    }
    Ok(())
}

fn reward(ws: &Workspace, log: &Path, warehouse: &Path, catalog: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let log = ws.logs(&[log.to_path_buf()])?.remove(0);
    let judge = mock_judge_for(&log, &ws.warehouse(warehouse)?)?;
    let scores = rescore(&log, &ws.catalog(catalog)?, &judge, &RewardParams::default());
    let mut text = String::new();
    let mut drift = 0;
    for (r, s) in log.steps.iter().zip(&scores) {
        let same = r.reward_breakdown.as_ref() == Some(&s.breakdown);
        drift += usize::from(!same);
        let line = serde_json::json!({
            "step": r.step_index,
            "reward_breakdown": s.breakdown,
            "matches_log": same,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(ws.path(p), text)?,
        None => print!("{text}"),
    }
    if drift > 0 {
        eprintln!("{drift} step(s) score differently from the log");
    }
    Ok(())
}

fn score(ws: &Workspace, dirs: &[PathBuf], alpha: f64, out: &Path) -> Result<()> {
    if !(alpha >= 0.0) {
        bail!("alpha must be non-negative");
    }
    let mut reports = Vec::new();
    for log in ws.logs(dirs)? {
        let t = Trajectory::from_log(&log);
        let r = score_trajectory(&t.steps, alpha).with_context(|| format!("scoring {}", log.dir.display()))?;
        let last = r.steps.last().map_or(0.0, |s| s.score);
        println!("{}\t{last}", t.name);
        reports.push((t.name, r));
    }
    let out = ws.path(out);
    fs::create_dir_all(&out)?;
    write_score_csv(&out.join("score.csv"), &reports)?;
    Ok(())
}

fn report(ws: &Workspace, dirs: &[PathBuf], catalog: Option<&PathBuf>, out: &Path) -> Result<()> {
    let cat = ws.catalog(catalog)?;
    let logs = ws.logs(dirs)?;
    let profiles: Vec<_> = logs
        .iter()
        .map(|l| (Trajectory::from_log(l).name, exploration_profile(&query_touches(l), &cat)))
        .collect();
    let (_, filter) = filter_trajectories(logs.iter().map(Trajectory::from_log).collect());
    let out = ws.path(out);
    fs::create_dir_all(&out)?;
    write_exploration_csv(&out.join("exploration.csv"), &profiles)?;
    write_violations_csv(&out.join("violations.csv"), &profiles)?;
    write_filter_report(&out.join("filter.json"), &filter)?;
    println!("kept {} of {} trajectories", filter.kept, filter.total);
    for (name, why) in &filter.dropped {
        println!("  dropped {name}: {why}");
    }
    Ok(())
}

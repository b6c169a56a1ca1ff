//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists built from their JSON form.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use aida_core::catalog::{Catalog as CoreCatalog, NameKind};
use aida_core::dsl::DslEngine;
use aida_core::episode::{run_episode as core_run_episode, EpisodeConfig};
use aida_core::eval;
use aida_core::reward::{self, GainParams};
use aida_core::rl::{self, StepFlags};
use aida_core::state::InsightStatus;
use aida_core::step::{parse_step as core_parse_step, SandboxConfig};
use aida_core::warehouse::{generate, WarehouseConfig, WarehouseHandle};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn name_kind(kind: &str) -> PyResult<NameKind> {
    match kind {
        "metric" => Ok(NameKind::Metric),
        "dimension" => Ok(NameKind::Dimension),
        "filter" => Ok(NameKind::FilterColumn),
        other => Err(value_err(format!("kind must be metric, dimension or filter, not `{other}`"))),
    }
}

fn status(s: &str) -> PyResult<InsightStatus> {
    InsightStatus::ALL
        .into_iter()
        .find(|x| x.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| value_err(format!("unknown insight status `{s}`")))
}

#[pyclass(frozen)]
struct Catalog {
    inner: Arc<CoreCatalog>,
}

#[pymethods]
impl Catalog {
    /// The bundled catalog, or one loaded from a TOML file.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => CoreCatalog::load(&p).map_err(value_err)?,
            None => CoreCatalog::default_catalog(),
        };
        Ok(Self { inner: Arc::new(inner) })
    }

    #[pyo3(signature = (token, kind="metric"))]
    fn resolve<'py>(&self, py: Python<'py>, token: &str, kind: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.resolve_name(token, name_kind(kind)?))
    }

    fn check<'py>(&self, py: Python<'py>, metrics: Vec<String>, dimensions: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.check_compatibility(&metrics, &dimensions))
    }

    fn metrics(&self) -> Vec<String> {
        self.inner.metrics().iter().map(|m| m.canonical_name.clone()).collect()
    }

    fn dimensions(&self) -> Vec<String> {
        self.inner.dimensions().iter().map(|d| d.canonical_name.clone()).collect()
    }
}

#[pyclass(frozen)]
struct Warehouse {
    handle: Arc<WarehouseHandle>,
    truths: String,
}

#[pymethods]
impl Warehouse {
    /// Builds a warehouse at `path` from a TOML config (empty for defaults).
    #[staticmethod]
    #[pyo3(signature = (path, config_toml=""))]
    fn generate(py: Python<'_>, path: PathBuf, config_toml: &str) -> PyResult<Self> {
        let cfg = if config_toml.trim().is_empty() {
            WarehouseConfig::default()
        } else {
            WarehouseConfig::from_toml_str(config_toml).map_err(value_err)?
        };
        let (handle, truths) = py.detach(|| generate(&cfg, &path)).map_err(runtime_err)?;
        Ok(Self {
            handle: Arc::new(handle),
            truths: serde_json::to_string(&truths).map_err(runtime_err)?,
        })
    }

    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            handle: Arc::new(WarehouseHandle::open(&path).map_err(runtime_err)?),
            truths: "[]".into(),
        })
    }

    /// Ground truths of the scenarios planted by `generate`.
    fn ground_truths<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py.import("json")?.call_method1("loads", (self.truths.as_str(),))
    }

    /// Runs a JSON request and returns the feedback package.
    #[pyo3(signature = (payload, catalog=None, budget_ms=60_000))]
    fn query<'py>(
        &self,
        py: Python<'py>,
        payload: &str,
        catalog: Option<&Catalog>,
        budget_ms: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cat = catalog.map_or_else(|| Arc::new(CoreCatalog::default_catalog()), |c| c.inner.clone());
        let engine = DslEngine::new(cat, self.handle.clone()).with_budget(Duration::from_millis(budget_ms));
        let outcome = py.detach(|| engine.run_payload(payload)).map_err(value_err)?;
        to_py(py, &outcome.package)
    }
}

#[pyfunction]
fn hallucination_value(m: usize, n: usize) -> f64 {
    reward::hallucination_value(m, n)
}

#[pyfunction]
fn length_reward(length: usize, min: usize, max: usize, scale: f64) -> PyResult<f64> {
    if min >= max {
        return Err(value_err("min must be below max"));
    }
    Ok(reward::length_reward(length, min, max, scale))
}

/// Gain of one judged insight under the default parameters.
#[pyfunction]
fn insight_gain(status_name: &str, valid: bool, hallucinated: usize) -> PyResult<f64> {
    Ok(GainParams::default().insight_gain(status(status_name)?, valid, hallucinated))
}

#[pyfunction]
#[pyo3(signature = (valid, hallucinated, alpha=eval::DEFAULT_ALPHA))]
fn insight_score(valid: bool, hallucinated: usize, alpha: f64) -> f64 {
    eval::insight_score(valid, hallucinated, alpha)
}

#[pyfunction]
fn compute_returns(intermediate: Vec<f64>, accumulated: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    Ok(rl::compute_returns(&intermediate, &accumulated, gamma).map_err(value_err)?.returns)
}

#[pyfunction]
fn rebn_advantages(returns: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rl::rebn_advantages(&returns).map_err(value_err)?.advantages)
}

/// Advantages as they enter the objective after masking. `flags` holds
/// `(syntax_failed, has_invalid_insight)` per step.
#[pyfunction]
fn masked_advantages(returns: Vec<Vec<f64>>, flags: Vec<Vec<(bool, bool)>>) -> PyResult<Vec<Vec<f64>>> {
    let batch = rl::rebn_advantages(&returns).map_err(value_err)?;
    let flags: Vec<Vec<StepFlags>> = flags
        .into_iter()
        .map(|t| {
            t.into_iter()
                .map(|(s, l)| StepFlags {
                    syntax_failed: s,
                    has_invalid_insight: l,
                })
                .collect()
        })
        .collect();
    let masked = rl::apply_masks(&batch, &flags).map_err(value_err)?;
    Ok((0..masked.num_samples())
        .map(|n| (0..masked.advantages[n].len()).map(|t| masked.effective(n, t)).collect())
        .collect())
}

#[pyfunction]
fn parse_step<'py>(py: Python<'py>, raw: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_parse_step(raw))
}

/// Runs one episode described by a TOML table and returns its summary.
/// Relative paths resolve against `root`.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, root=None))]
fn run_episode<'py>(
    py: Python<'py>,
    config_toml: &str,
    out_dir: PathBuf,
    root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = EpisodeConfig::from_toml_str(config_toml).map_err(value_err)?;
    if let Some(r) = root {
        cfg = cfg.rooted(&r);
    }
    let summary = py
        .detach(|| core_run_episode(&cfg, &out_dir, SandboxConfig::from_env()))
        .map_err(runtime_err)?;
    to_py(py, &summary)
}

#[pymodule]
fn aida(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Catalog>()?;
    m.add_class::<Warehouse>()?;
    m.add_function(wrap_pyfunction!(hallucination_value, m)?)?;
    m.add_function(wrap_pyfunction!(length_reward, m)?)?;
    m.add_function(wrap_pyfunction!(insight_gain, m)?)?;
    m.add_function(wrap_pyfunction!(insight_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_returns, m)?)?;
    m.add_function(wrap_pyfunction!(rebn_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(masked_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(parse_step, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    Ok(())
}

//! Returns, batch-normalized advantages, gradient masks and the policy
//! gradient objective value. Log-probabilities come from outside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardBreakdown;

/// Batches whose return spread is below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RlError {
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("batch has no samples")]
    EmptyBatch,
    #[error("discount {0} is outside [0, 1]")]
    BadGamma(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReturns {
    pub returns: Vec<f64>,
    pub gamma: f64,
}

/// `G_t = I_t + sum_{j >= t} gamma^(j-t) A_j`: intermediate rewards count
/// only at their own step, accumulated rewards are discounted forward.
pub fn compute_returns(intermediate: &[f64], accumulated: &[f64], gamma: f64) -> Result<TrajectoryReturns, RlError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RlError::BadGamma(gamma.to_string()));
    }
    if intermediate.len() != accumulated.len() {
        return Err(RlError::Shape(format!(
            "{} intermediate vs {} accumulated rewards",
            intermediate.len(),
            accumulated.len()
        )));
    }
    if intermediate.is_empty() {
        return Err(RlError::EmptyTrajectory);
    }
    let mut returns = vec![0.0; intermediate.len()];
    let mut tail = 0.0;
    for t in (0..intermediate.len()).rev() {
        tail = accumulated[t] + gamma * tail;
        returns[t] = intermediate[t] + tail;
    }
    Ok(TrajectoryReturns { returns, gamma })
}

pub fn returns_from_breakdowns(steps: &[RewardBreakdown], gamma: f64) -> Result<TrajectoryReturns, RlError> {
    let i: Vec<f64> = steps.iter().map(|b| b.intermediate_total).collect();
    let a: Vec<f64> = steps.iter().map(|b| b.accumulated_total).collect();
    compute_returns(&i, &a, gamma)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub syntax_failed: bool,
    pub has_invalid_insight: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMask {
    pub schema_mask: bool,
    pub logic_mask: bool,
}

impl StepMask {
    pub fn any(self) -> bool {
        self.schema_mask || self.logic_mask
    }
}

/// Advantages per sample and step. Statistics are taken over every return
/// in the batch before any masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub advantages: Vec<Vec<f64>>,
    pub batch_mean: f64,
    pub batch_std: f64,
    pub masks: Vec<Vec<StepMask>>,
}

impl AdvantageBatch {
    pub fn num_samples(&self) -> usize {
        self.advantages.len()
    }

    /// Advantage as it enters the objective: zero where masked.
    pub fn effective(&self, n: usize, t: usize) -> f64 {
        if self.masks[n][t].any() {
            0.0
        } else {
            self.advantages[n][t]
        }
    }
}

/// Standardizes all returns of the batch with the population standard
/// deviation.
pub fn rebn_advantages(returns: &[Vec<f64>]) -> Result<AdvantageBatch, RlError> {
    let count: usize = returns.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(RlError::EmptyBatch);
    }
    let flat = returns.iter().flatten();
    let mean = flat.clone().sum::<f64>() / count as f64;
    let var = flat.map(|g| (g - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    let advantages = returns
        .iter()
        .map(|traj| {
            traj.iter()
                .map(|g| if std < DEGENERATE_STD { 0.0 } else { (g - mean) / std })
                .collect()
        })
        .collect();
    Ok(AdvantageBatch {
        advantages,
        batch_mean: mean,
        batch_std: std,
        masks: returns.iter().map(|t| vec![StepMask::default(); t.len()]).collect(),
    })
}

/// Masks positive-advantage steps that broke syntax or carry an invalid
/// insight. Negative and zero advantages pass through.
pub fn apply_masks(batch: &AdvantageBatch, flags: &[Vec<StepFlags>]) -> Result<AdvantageBatch, RlError> {
    check_shape(&batch.advantages, flags, "flags")?;
    let mut out = batch.clone();
    for (n, traj) in flags.iter().enumerate() {
        for (t, f) in traj.iter().enumerate() {
            let positive = batch.advantages[n][t] > 0.0;
            out.masks[n][t] = StepMask {
                schema_mask: positive && f.syntax_failed,
                logic_mask: positive && f.has_invalid_insight,
            };
        }
    }
    Ok(out)
}

fn check_shape<T>(adv: &[Vec<f64>], other: &[Vec<T>], what: &str) -> Result<(), RlError> {
    if adv.len() != other.len() || adv.iter().zip(other).any(|(a, b)| a.len() != b.len()) {
        return Err(RlError::Shape(format!("{what} do not match the advantage batch")));
    }
    Ok(())
}

/// `(1/N) sum_n sum_t A_t^n log p_t^n` over unmasked steps.
pub fn objective(batch: &AdvantageBatch, logprobs: &[Vec<f64>]) -> Result<f64, RlError> {
    check_shape(&batch.advantages, logprobs, "log-probabilities")?;
    if batch.num_samples() == 0 {
        return Err(RlError::EmptyBatch);
    }
    let mut total = 0.0;
    for (n, traj) in logprobs.iter().enumerate() {
        for (t, lp) in traj.iter().enumerate() {
            total += batch.effective(n, t) * lp;
        }
    }
    Ok(total / batch.num_samples() as f64)
}

//! Group-relative advantage estimators.
//!
//! * [`grpo_advantage`]: standardize rewards within one group.
//! * [`global_advantage`]: standardize each cell against the pooled `m·n`
//!   rewards of all variants of a seed question.
//! * [`local_advantage`]: standardize each variant row on its own.
//! * [`hierarchical_advantage`]: `global + local` when the trajectory is
//!   scored under its own variant (`j == k`), `global` alone otherwise.
//!
//! Standard deviations are population deviations. A group whose rewards are
//! all identical carries no ranking signal and gets all-zero advantages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardTensor;

/// Floor on the standard deviation of a non-degenerate group.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("advantage group is empty")]
    EmptyGroup,
    #[error("reward tensor is empty")]
    EmptyTensor,
    #[error("reward tensor rows have unequal lengths")]
    Ragged,
}

/// Whether every reward in the group is identical.
pub fn is_degenerate(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes `values` against the statistics of `reference`.
fn standardize_against(values: &[f64], reference: &[f64]) -> (Vec<f64>, bool) {
    if is_degenerate(reference) {
        return (vec![0.0; values.len()], true);
    }
    let (mean, std) = mean_std(reference);
    let denom = std.max(STD_EPSILON);
    (values.iter().map(|r| (r - mean) / denom).collect(), false)
}

/// `(R_i − mean) / std` over one group of `G` responses.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>, AdvantageError> {
    if rewards.is_empty() {
        return Err(AdvantageError::EmptyGroup);
    }
    Ok(standardize_against(rewards, rewards).0)
}

fn check_tensor(rewards: &RewardTensor) -> Result<(), AdvantageError> {
    if rewards.values.is_empty() || rewards.is_empty() {
        return Err(AdvantageError::EmptyTensor);
    }
    let n = rewards.samples_per_variant();
    if rewards.values.iter().any(|r| r.len() != n) {
        return Err(AdvantageError::Ragged);
    }
    Ok(())
}

/// Cells standardized against the pooled rewards, plus the pooled degeneracy
/// flag.
pub fn global_advantage(rewards: &RewardTensor) -> Result<(Vec<Vec<f64>>, bool), AdvantageError> {
    check_tensor(rewards)?;
    let pooled: Vec<f64> = rewards.pooled().collect();
    let degenerate = is_degenerate(&pooled);
    let rows = rewards
        .values
        .iter()
        .map(|row| standardize_against(row, &pooled).0)
        .collect();
    Ok((rows, degenerate))
}

/// Each row standardized on its own, plus per-row degeneracy flags.
pub fn local_advantage(
    rewards: &RewardTensor,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), AdvantageError> {
    check_tensor(rewards)?;
    Ok(rewards
        .values
        .iter()
        .map(|row| standardize_against(row, row))
        .unzip())
}

/// Global, local and hierarchical advantages for one seed question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTensor {
    m: usize,
    n: usize,
    pub global: Vec<Vec<f64>>,
    pub local: Vec<Vec<f64>>,
    pub local_degenerate: Vec<bool>,
    pub pooled_degenerate: bool,
    /// Flattened `[j][i][k]`.
    hier: Vec<f64>,
}

impl AdvantageTensor {
    pub fn num_variants(&self) -> usize {
        self.m
    }

    pub fn samples_per_variant(&self) -> usize {
        self.n
    }

    /// `Â^hier` for trajectory `i` of variant `j`, evaluated under variant `k`.
    pub fn hier(&self, j: usize, i: usize, k: usize) -> f64 {
        self.hier[(j * self.n + i) * self.m + k]
    }

    pub fn hier_values(&self) -> &[f64] {
        &self.hier
    }
}

pub fn hierarchical_advantage(rewards: &RewardTensor) -> Result<AdvantageTensor, AdvantageError> {
    let (global, pooled_degenerate) = global_advantage(rewards)?;
    let (local, local_degenerate) = local_advantage(rewards)?;
    let m = rewards.num_variants();
    let n = rewards.samples_per_variant();
    let mut hier = Vec::with_capacity(m * n * m);
    for j in 0..m {
        for i in 0..n {
            for k in 0..m {
                // A degenerate local row is all zeros, so it adds nothing here.
                hier.push(if j == k {
                    global[j][i] + local[j][i]
                } else {
                    global[j][i]
                });
            }
        }
    }
    Ok(AdvantageTensor {
        m,
        n,
        global,
        local,
        local_degenerate,
        pooled_degenerate,
        hier,
    })
}

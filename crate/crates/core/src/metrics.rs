//! Per-step training metrics and their CSV form.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::is_degenerate;
use crate::env::Question;
use crate::policy::{kl_exact, FeatureLayout, PolicyError, PolicyParams, PositionDistributions};
use crate::reward::{accuracy_reward, RewardTensor};
use crate::trainer::RolloutRound;

/// Temperature for greedy evaluation. Any positive value yields the same argmax.
pub const EVAL_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("metrics file has no rows")]
    Empty,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_density: f64,
    pub valid_adv_ratio_pooled: f64,
    pub valid_adv_ratio_local: f64,
    pub eval_accuracy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub dropped_seeds: usize,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "step",
    "mean_reward",
    "reward_density",
    "valid_adv_ratio_pooled",
    "valid_adv_ratio_local",
    "eval_accuracy",
    "mean_kl",
    "clip_fraction",
    "dropped_seeds",
];

/// How rewards are grouped when deciding whether advantages are informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One group of `m·n` rewards per seed question.
    Pooled,
    /// One group of `n` rewards per variant.
    PerVariant,
}

pub fn pooled_degenerate(rewards: &RewardTensor) -> bool {
    let pooled: Vec<f64> = rewards.pooled().collect();
    is_degenerate(&pooled)
}

pub fn mean_reward(round: &RolloutRound) -> f64 {
    let (sum, count) = round
        .seeds
        .iter()
        .flat_map(|s| s.rewards.pooled())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fraction of trajectories that earned the accuracy reward.
pub fn reward_density(round: &RolloutRound) -> f64 {
    let (hits, count) = round
        .seeds
        .iter()
        .flat_map(|s| s.rewards.accuracy.iter().flatten())
        .fold((0usize, 0usize), |(h, c), &a| (h + a as usize, c + 1));
    if count == 0 {
        0.0
    } else {
        hits as f64 / count as f64
    }
}

/// Fraction of groups whose rewards are not all identical.
pub fn valid_advantage_ratio(round: &RolloutRound, grouping: Grouping) -> f64 {
    let (valid, total) = round
        .seeds
        .iter()
        .fold((0usize, 0usize), |(v, t), s| match grouping {
            Grouping::Pooled => (v + !pooled_degenerate(&s.rewards) as usize, t + 1),
            Grouping::PerVariant => {
                let rows = &s.rewards.values;
                let ok = rows.iter().filter(|r| !is_degenerate(r)).count();
                (v + ok, t + rows.len())
            }
        });
    if total == 0 {
        0.0
    } else {
        valid as f64 / total as f64
    }
}

/// Greedy-decoding accuracy on held-out questions.
pub fn eval_accuracy(
    params: &PolicyParams,
    layout: &FeatureLayout,
    questions: &[Question],
) -> Result<f64, PolicyError> {
    if questions.is_empty() {
        return Ok(0.0);
    }
    let correct = questions
        .par_iter()
        .map(|q| {
            let x = layout.featurize(q)?;
            let tokens = PositionDistributions::new(params, &x, EVAL_TEMPERATURE)?.greedy();
            Ok(accuracy_reward(&tokens, q.answer) as usize)
        })
        .collect::<Result<Vec<_>, PolicyError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / questions.len() as f64)
}

/// Mean `KL(π_θ ‖ π_ref)` over every variant question in the round.
pub fn mean_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    round: &RolloutRound,
    temperature: f64,
) -> Result<f64, PolicyError> {
    let per_seed = round
        .seeds
        .par_iter()
        .map(|s| {
            s.features
                .iter()
                .map(|x| kl_exact(params, reference, x, temperature))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<f64> = per_seed.into_iter().flatten().collect();
    if all.is_empty() {
        return Ok(0.0);
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

pub fn write_csv<W: io::Write>(writer: W, rows: &[StepMetrics]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, rows: &[StepMetrics]) -> Result<(), MetricsError> {
    write_csv(std::fs::File::create(path)?, rows)
}

pub fn read_csv<R: io::Read>(reader: R) -> Result<Vec<StepMetrics>, MetricsError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(Into::into)
}

pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>, MetricsError> {
    read_csv(std::fs::File::open(path)?)
}

/// Headline numbers for a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_eval_accuracy: f64,
    pub best_eval_accuracy: f64,
    pub mean_reward_density: f64,
    pub mean_valid_adv_ratio_pooled: f64,
    pub mean_valid_adv_ratio_local: f64,
    pub total_dropped_seeds: usize,
}

pub fn summarize(rows: &[StepMetrics]) -> Result<RunSummary, MetricsError> {
    let last = rows.last().ok_or(MetricsError::Empty)?;
    let mean = |f: fn(&StepMetrics) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(RunSummary {
        steps: rows.len(),
        final_eval_accuracy: last.eval_accuracy,
        best_eval_accuracy: rows
            .iter()
            .map(|r| r.eval_accuracy)
            .fold(f64::MIN, f64::max),
        mean_reward_density: mean(|r| r.reward_density),
        mean_valid_adv_ratio_pooled: mean(|r| r.valid_adv_ratio_pooled),
        mean_valid_adv_ratio_local: mean(|r| r.valid_adv_ratio_local),
        total_dropped_seeds: rows.iter().map(|r| r.dropped_seeds).sum(),
    })
}

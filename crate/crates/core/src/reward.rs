//! Rule-based outcome rewards.
//!
//! A response earns the format reward when it matches
//! `THINK{1..L-3} ANSWER <digit> END PAD*`, and the accuracy reward when it is
//! well formed and the answered digit is correct. The cell reward is
//! `accuracy + λ_fmt · format`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::VariantSet;
use crate::policy::{Token, Trajectory};

pub const DEFAULT_FORMAT_WEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("trajectory grid is {rows}x? but the variant set has {variants} variants")]
    VariantCount { rows: usize, variants: usize },
    #[error("variant {row} has {len} trajectories, expected {expected}")]
    RaggedRow {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("format weight must be finite and non-negative, got {0}")]
    InvalidFormatWeight(f64),
}

/// Position of the answered digit, if the sequence is well formed.
pub fn answer_slot(tokens: &[Token]) -> Option<usize> {
    let len = tokens.len();
    if len < 4 {
        return None;
    }
    let thinks = tokens.iter().take_while(|&&t| t == Token::THINK).count();
    if thinks == 0 || thinks > len - 3 {
        return None;
    }
    let rest = &tokens[thinks..];
    if rest[0] != Token::ANSWER || rest[1].as_digit().is_none() || rest[2] != Token::END {
        return None;
    }
    rest[3..]
        .iter()
        .all(|&t| t == Token::PAD)
        .then_some(thinks + 1)
}

pub fn format_reward(tokens: &[Token]) -> u8 {
    answer_slot(tokens).is_some() as u8
}

pub fn accuracy_reward(tokens: &[Token], answer: u8) -> u8 {
    match answer_slot(tokens) {
        Some(slot) => (tokens[slot].as_digit() == Some(answer)) as u8,
        None => 0,
    }
}

/// Rewards for an `m × n` rollout grid; row `j` belongs to variant `Q_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTensor {
    pub values: Vec<Vec<f64>>,
    pub accuracy: Vec<Vec<u8>>,
    pub format: Vec<Vec<u8>>,
}

impl RewardTensor {
    /// Builds a tensor from plain values, with no component breakdown. Useful
    /// for exercising advantage estimators directly.
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        let zeros: Vec<Vec<u8>> = values.iter().map(|r| vec![0; r.len()]).collect();
        Self {
            values,
            accuracy: zeros.clone(),
            format: zeros,
        }
    }

    pub fn num_variants(&self) -> usize {
        self.values.len()
    }

    pub fn samples_per_variant(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Vec::is_empty)
    }

    pub fn pooled(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

pub fn score_batch(
    trajectories: &[Vec<Trajectory>],
    vs: &VariantSet,
    format_weight: f64,
) -> Result<RewardTensor, RewardError> {
    if !(format_weight >= 0.0 && format_weight.is_finite()) {
        return Err(RewardError::InvalidFormatWeight(format_weight));
    }
    if trajectories.len() != vs.len() {
        return Err(RewardError::VariantCount {
            rows: trajectories.len(),
            variants: vs.len(),
        });
    }
    let expected = trajectories.first().map_or(0, Vec::len);
    let mut out = RewardTensor {
        values: Vec::with_capacity(vs.len()),
        accuracy: Vec::with_capacity(vs.len()),
        format: Vec::with_capacity(vs.len()),
    };
    for (row, (trajs, question)) in trajectories.iter().zip(&vs.variants).enumerate() {
        if trajs.len() != expected {
            return Err(RewardError::RaggedRow {
                row,
                len: trajs.len(),
                expected,
            });
        }
        let acc: Vec<u8> = trajs
            .iter()
            .map(|t| accuracy_reward(&t.tokens, question.answer))
            .collect();
        let fmt: Vec<u8> = trajs.iter().map(|t| format_reward(&t.tokens)).collect();
        out.values.push(
            acc.iter()
                .zip(&fmt)
                .map(|(&a, &f)| a as f64 + format_weight * f as f64)
                .collect(),
        );
        out.accuracy.push(acc);
        out.format.push(fmt);
    }
    Ok(out)
}

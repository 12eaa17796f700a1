//! Share-GRPO on a synthetic grid-sum reasoning task.
//!
//! Seed questions are expanded into semantically consistent variants, a small
//! per-position softmax policy samples answers for each variant, and the
//! rewards of all variants are shared when estimating advantages.

pub mod advantage;
pub mod env;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod run;
pub mod trainer;
pub mod verify;

pub use advantage::{hierarchical_advantage, AdvantageTensor};
pub use env::{GridSumEnv, Question, VariantSet};
pub use metrics::StepMetrics;
pub use policy::{PolicyParams, Token, Trajectory};
pub use reward::RewardTensor;
pub use trainer::{train, Algo, RolloutRound, TrainConfig, TrainError};

//! Rollout rounds, the GRPO and Share-GRPO objectives, dynamic sampling and
//! the training loop.
//!
//! Everything is deterministic given the config: every random draw comes from
//! a ChaCha stream whose seed is derived from `rng_seed` and the position of
//! the draw (step, seed slot, variant), and all cross-seed reductions run in
//! seed order regardless of how many worker threads computed the parts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{grpo_advantage, hierarchical_advantage, AdvantageError, AdvantageTensor};
use crate::env::{EnvError, GridSumEnv, Question, VariantSet, DEFAULT_GRID_DIM};
use crate::metrics::{self, Grouping, StepMetrics};
use crate::policy::{
    accumulate_outer, kl_with_grad, sample_from, FeatureLayout, PolicyError, PolicyInit,
    PolicyParams, PositionDistributions, QuestionRef, Trajectory,
};
use crate::reward::{score_batch, RewardError, RewardTensor, DEFAULT_FORMAT_WEIGHT};

/// Seed used for the held-out evaluation questions unless configured.
pub const DEFAULT_EVAL_SEED: u64 = 0x5eed_e7a1;
pub const DEFAULT_EVAL_SIZE: usize = 500;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(
        "trajectory log-probs come from snapshot {found:#x}, round was frozen at {expected:#x}"
    )]
    SnapshotMismatch { expected: u64, found: u64 },
    #[error("seed {seed_id}: missing cross-variant old log-probs ({found} of {expected})")]
    MissingCrossLogprobs {
        seed_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("objective expects {expected} advantages")]
    WrongAdvantageKind { expected: &'static str },
    #[error("rollout batch is empty")]
    EmptyBatch,
    #[error("training diverged at step {step}, epoch {epoch}: {reason}")]
    Divergence {
        step: usize,
        epoch: usize,
        reason: String,
    },
    #[error("failed to build worker pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    #[serde(alias = "share-grpo")]
    ShareGrpo,
}

impl Algo {
    /// GRPO carries a KL penalty; the shared objective has none.
    pub fn default_kl_beta(self) -> f64 {
        match self {
            Algo::Grpo => 0.01,
            Algo::ShareGrpo => 0.0,
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "share-grpo" | "share_grpo" => Ok(Algo::ShareGrpo),
            other => Err(ConfigError::Invariant(format!("unknown algo `{other}`"))),
        }
    }
}

/// Task flavour. The sparse variant drops the format reward, so only correct
/// answers score and whole groups frequently tie at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    GridSum,
    #[serde(alias = "gridsum-sparse")]
    GridSumSparse,
}

impl std::str::FromStr for TaskKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid_sum" | "gridsum" => Ok(TaskKind::GridSum),
            "grid_sum_sparse" | "gridsum-sparse" | "gridsum_sparse" => Ok(TaskKind::GridSumSparse),
            other => Err(ConfigError::Invariant(format!("unknown task `{other}`"))),
        }
    }
}

/// Fully resolved training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    pub task: TaskKind,
    pub grid_dim: usize,
    pub m: usize,
    pub n: usize,
    pub p: f64,
    pub temperature: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lambda_fmt: f64,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub batch_seed_questions: usize,
    pub steps: usize,
    pub dynamic_sampling: bool,
    pub rng_seed: u64,
    pub eval_seed: u64,
    pub eval_size: usize,
}

impl TrainConfig {
    pub fn new(algo: Algo) -> Self {
        Self {
            algo,
            task: TaskKind::GridSum,
            grid_dim: DEFAULT_GRID_DIM,
            m: 2,
            n: 6,
            p: 0.3,
            temperature: 0.7,
            clip_eps: 0.2,
            kl_beta: algo.default_kl_beta(),
            lambda_fmt: DEFAULT_FORMAT_WEIGHT,
            learning_rate: 0.05,
            ppo_epochs: 1,
            batch_seed_questions: 32,
            steps: 300,
            dynamic_sampling: false,
            rng_seed: 0,
            eval_seed: DEFAULT_EVAL_SEED,
            eval_size: DEFAULT_EVAL_SIZE,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invariant(msg));
        if self.m < 1 {
            return fail(format!("m must be >= 1, got {}", self.m));
        }
        if self.n < 1 {
            return fail(format!("n must be >= 1, got {}", self.n));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return fail(format!("p must lie in [0, 1], got {}", self.p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return fail(format!("clip_eps must be > 0, got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if !(self.lambda_fmt >= 0.0 && self.lambda_fmt.is_finite()) {
            return fail(format!("lambda_fmt must be >= 0, got {}", self.lambda_fmt));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.ppo_epochs < 1 {
            return fail("ppo_epochs must be >= 1".into());
        }
        if self.batch_seed_questions < 1 {
            return fail("batch_seed_questions must be >= 1".into());
        }
        if self.grid_dim < 2 {
            return fail(format!("grid_dim must be >= 2, got {}", self.grid_dim));
        }
        if self.eval_size < 1 {
            return fail("eval_size must be >= 1".into());
        }
        Ok(())
    }

    /// Format weight actually used for scoring.
    pub fn effective_format_weight(&self) -> f64 {
        match self.task {
            TaskKind::GridSum => self.lambda_fmt,
            TaskKind::GridSumSparse => 0.0,
        }
    }
}

/// A partial config: every field optional. Layers are merged as
/// built-in defaults < config file < command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigPatch {
    pub algo: Option<Algo>,
    pub task: Option<TaskKind>,
    pub grid_dim: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub p: Option<f64>,
    pub temperature: Option<f64>,
    pub clip_eps: Option<f64>,
    pub kl_beta: Option<f64>,
    pub lambda_fmt: Option<f64>,
    pub learning_rate: Option<f64>,
    pub ppo_epochs: Option<usize>,
    pub batch_seed_questions: Option<usize>,
    pub steps: Option<usize>,
    pub dynamic_sampling: Option<bool>,
    pub rng_seed: Option<u64>,
    pub eval_seed: Option<u64>,
    pub eval_size: Option<usize>,
}

impl TrainConfigPatch {
    /// Fields set in `other` win.
    pub fn overlay(self, other: TrainConfigPatch) -> TrainConfigPatch {
        macro_rules! pick {
            ($($f:ident),*) => {
                TrainConfigPatch { $($f: other.$f.or(self.$f)),* }
            };
        }
        pick!(
            algo,
            task,
            grid_dim,
            m,
            n,
            p,
            temperature,
            clip_eps,
            kl_beta,
            lambda_fmt,
            learning_rate,
            ppo_epochs,
            batch_seed_questions,
            steps,
            dynamic_sampling,
            rng_seed,
            eval_seed,
            eval_size
        )
    }

    /// Applies the patch over the defaults for its algorithm (share-grpo when
    /// unset) and validates the result.
    pub fn resolve(&self) -> Result<TrainConfig, ConfigError> {
        let algo = self.algo.unwrap_or(Algo::ShareGrpo);
        let d = TrainConfig::new(algo);
        let cfg = TrainConfig {
            algo,
            task: self.task.unwrap_or(d.task),
            grid_dim: self.grid_dim.unwrap_or(d.grid_dim),
            m: self.m.unwrap_or(d.m),
            n: self.n.unwrap_or(d.n),
            p: self.p.unwrap_or(d.p),
            temperature: self.temperature.unwrap_or(d.temperature),
            clip_eps: self.clip_eps.unwrap_or(d.clip_eps),
            kl_beta: self.kl_beta.unwrap_or(d.kl_beta),
            lambda_fmt: self.lambda_fmt.unwrap_or(d.lambda_fmt),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            ppo_epochs: self.ppo_epochs.unwrap_or(d.ppo_epochs),
            batch_seed_questions: self.batch_seed_questions.unwrap_or(d.batch_seed_questions),
            steps: self.steps.unwrap_or(d.steps),
            dynamic_sampling: self.dynamic_sampling.unwrap_or(d.dynamic_sampling),
            rng_seed: self.rng_seed.unwrap_or(d.rng_seed),
            eval_seed: self.eval_seed.unwrap_or(d.eval_seed),
            eval_size: self.eval_size.unwrap_or(d.eval_size),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&TrainConfig> for TrainConfigPatch {
    fn from(c: &TrainConfig) -> Self {
        TrainConfigPatch {
            algo: Some(c.algo),
            task: Some(c.task),
            grid_dim: Some(c.grid_dim),
            m: Some(c.m),
            n: Some(c.n),
            p: Some(c.p),
            temperature: Some(c.temperature),
            clip_eps: Some(c.clip_eps),
            kl_beta: Some(c.kl_beta),
            lambda_fmt: Some(c.lambda_fmt),
            learning_rate: Some(c.learning_rate),
            ppo_epochs: Some(c.ppo_epochs),
            batch_seed_questions: Some(c.batch_seed_questions),
            steps: Some(c.steps),
            dynamic_sampling: Some(c.dynamic_sampling),
            rng_seed: Some(c.rng_seed),
            eval_seed: Some(c.eval_seed),
            eval_size: Some(c.eval_size),
        }
    }
}

/// Purpose tags for derived RNG streams.
mod stream {
    pub const INIT: u64 = 1;
    pub const QUESTION: u64 = 2;
    pub const ONLINE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const EVAL: u64 = 5;
}

/// Mixes a base seed with a path of integers into an independent seed
/// (SplitMix64 finalizer applied per component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| {
        mix(acc.rotate_left(23).wrapping_add(mix(p)))
    })
}

/// Task environment plus the feature layout the policy is built on.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub env: GridSumEnv,
    pub layout: FeatureLayout,
}

impl TaskSetup {
    pub fn new(grid_dim: usize) -> Result<Self, EnvError> {
        let env = GridSumEnv::new(grid_dim)?;
        let layout = FeatureLayout::new(grid_dim, env.bank().len(), env.registry().len());
        Ok(Self { env, layout })
    }

    pub fn initial_params(&self, rng_seed: u64) -> PolicyParams {
        PolicyParams::initial(
            &self.layout,
            &PolicyInit::default(),
            derive_seed(rng_seed, &[stream::INIT]),
        )
    }
}

/// One seed question with the id its RNG streams are keyed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedQuestion {
    pub seed_id: u64,
    pub question: Question,
}

/// Training seed questions for one step.
pub fn seed_batch(cfg: &TrainConfig, step: usize) -> Result<Vec<SeedQuestion>, EnvError> {
    (0..cfg.batch_seed_questions)
        .map(|b| {
            let seed_id = derive_seed(cfg.rng_seed, &[stream::QUESTION, step as u64, b as u64]);
            Ok(SeedQuestion {
                seed_id,
                question: crate::env::generate_question(seed_id, cfg.grid_dim)?,
            })
        })
        .collect()
}

/// Held-out questions; their seeds live in a different stream from training.
pub fn eval_set(eval_seed: u64, size: usize, grid_dim: usize) -> Result<Vec<Question>, EnvError> {
    (0..size)
        .map(|i| {
            crate::env::generate_question(
                derive_seed(eval_seed, &[stream::EVAL, i as u64]),
                grid_dim,
            )
        })
        .collect()
}

/// Advantages attached to one seed question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeedAdvantages {
    /// Plain GRPO: each variant row is its own group (`m × n`).
    Group(Vec<Vec<f64>>),
    /// Share-GRPO hierarchical advantages.
    Hierarchical(AdvantageTensor),
}

/// Everything sampled and scored for one seed question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRollout {
    pub variant_set: VariantSet,
    pub features: Vec<Vec<f64>>,
    /// `m × n`; row `j` was sampled from variant `j`.
    pub trajectories: Vec<Vec<Trajectory>>,
    /// `log π_old(o_i^{Q_j} | Q_k)`, flattened `[j][i][k]`.
    pub old_logprobs: Vec<f64>,
    pub rewards: RewardTensor,
    pub advantages: SeedAdvantages,
}

impl SeedRollout {
    pub fn num_variants(&self) -> usize {
        self.trajectories.len()
    }

    pub fn samples_per_variant(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    pub fn old_logprob(&self, j: usize, i: usize, k: usize) -> f64 {
        let (m, n) = (self.num_variants(), self.samples_per_variant());
        self.old_logprobs[(j * n + i) * m + k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRound {
    pub step: usize,
    pub algo: Algo,
    /// Digest of the parameters every `logprob_old` was computed under.
    pub snapshot: u64,
    pub seeds: Vec<SeedRollout>,
    /// Seeds removed by dynamic sampling.
    pub dropped_seeds: usize,
}

impl RolloutRound {
    pub fn variant_sets(&self) -> impl Iterator<Item = &VariantSet> {
        self.seeds.iter().map(|s| &s.variant_set)
    }

    pub fn num_trajectories(&self) -> usize {
        self.seeds
            .iter()
            .map(|s| s.num_variants() * s.samples_per_variant())
            .sum()
    }
}

fn rollout_seed(
    params: &PolicyParams,
    cfg: &TrainConfig,
    task: &TaskSetup,
    step: usize,
    slot: usize,
    seed: &SeedQuestion,
    snapshot: u64,
) -> Result<SeedRollout, TrainError> {
    let offline = task
        .env
        .expand_offline(seed.seed_id, &seed.question, cfg.m)?;
    let online_seed = derive_seed(cfg.rng_seed, &[stream::ONLINE, step as u64, slot as u64]);
    let variant_set = task.env.expand_online(&offline, cfg.p, online_seed)?;

    let features = variant_set
        .variants
        .iter()
        .map(|q| task.layout.featurize(q))
        .collect::<Result<Vec<_>, _>>()?;
    let dists = features
        .iter()
        .map(|x| PositionDistributions::new(params, x, cfg.temperature))
        .collect::<Result<Vec<_>, _>>()?;

    let m = variant_set.len();
    let mut trajectories = Vec::with_capacity(m);
    for (j, dist) in dists.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.rng_seed,
            &[stream::SAMPLE, step as u64, slot as u64, j as u64],
        ));
        let row: Vec<Trajectory> = (0..cfg.n)
            .map(|i| {
                let s = sample_from(dist, &mut rng);
                Trajectory {
                    question_ref: QuestionRef {
                        seed_id: seed.seed_id,
                        variant: j,
                    },
                    tokens: s.tokens,
                    logprob_old: s.logprob,
                    sample_index: i,
                    snapshot,
                }
            })
            .collect();
        trajectories.push(row);
    }

    // Old-policy values for every (trajectory, conditioning variant) pair;
    // the shared objective needs the off-diagonal ones.
    let mut old_logprobs = Vec::with_capacity(m * cfg.n * m);
    for row in &trajectories {
        for t in row {
            for dist in &dists {
                old_logprobs.push(dist.sequence_logprob(&t.tokens));
            }
        }
    }

    let rewards = score_batch(&trajectories, &variant_set, cfg.effective_format_weight())?;
    let advantages = match cfg.algo {
        Algo::ShareGrpo => SeedAdvantages::Hierarchical(hierarchical_advantage(&rewards)?),
        Algo::Grpo => SeedAdvantages::Group(
            rewards
                .values
                .iter()
                .map(|row| grpo_advantage(row))
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(SeedRollout {
        variant_set,
        features,
        trajectories,
        old_logprobs,
        rewards,
        advantages,
    })
}

/// Expands, samples, scores and computes advantages for every seed question.
pub fn rollout_round(
    params: &PolicyParams,
    cfg: &TrainConfig,
    task: &TaskSetup,
    batch: &[SeedQuestion],
    step: usize,
) -> Result<RolloutRound, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let snapshot = params.digest();
    let seeds = batch
        .par_iter()
        .enumerate()
        .map(|(slot, seed)| rollout_seed(params, cfg, task, step, slot, seed, snapshot))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutRound {
        step,
        algo: cfg.algo,
        snapshot,
        seeds,
        dropped_seeds: 0,
    })
}

/// Drops seeds whose pooled rewards are all identical.
pub fn dynamic_sampling_filter(round: RolloutRound) -> RolloutRound {
    let before = round.seeds.len();
    let seeds: Vec<SeedRollout> = round
        .seeds
        .into_iter()
        .filter(|s| !metrics::pooled_degenerate(&s.rewards))
        .collect();
    RolloutRound {
        dropped_seeds: round.dropped_seeds + before - seeds.len(),
        seeds,
        ..round
    }
}

/// Objective value, analytic gradient and diagnostics for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Fraction of surrogate terms where the clipped branch is selected.
    pub clip_fraction: f64,
    /// Largest `|ratio − 1|` over all surrogate terms.
    pub max_ratio_deviation: f64,
    /// Mean `KL(π_θ ‖ π_ref)` over the round's questions (0 when β = 0).
    pub mean_kl: f64,
}

/// One clipped surrogate term: value, gradient coefficient on
/// `∇ log π_θ`, and whether the clipped branch won.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, ratio * advantage, false)
    }
}

struct SeedObjective {
    surrogate: f64,
    gradient: Vec<f64>,
    terms: usize,
    clipped: usize,
    max_dev: f64,
    kl: f64,
}

fn check_snapshot(round: &RolloutRound, seed: &SeedRollout) -> Result<(), TrainError> {
    let (m, n) = (seed.num_variants(), seed.samples_per_variant());
    if let Some(t) = seed
        .trajectories
        .iter()
        .flatten()
        .find(|t| t.snapshot != round.snapshot)
    {
        return Err(TrainError::SnapshotMismatch {
            expected: round.snapshot,
            found: t.snapshot,
        });
    }
    if seed.old_logprobs.len() != m * n * m {
        return Err(TrainError::MissingCrossLogprobs {
            seed_id: seed.variant_set.seed_id,
            expected: m * n * m,
            found: seed.old_logprobs.len(),
        });
    }
    Ok(())
}

/// Surrogate over `(j, i, k)` triples, where `advantage(j, i, k)` returns
/// `None` for pairs the objective skips.
fn seed_objective<A>(
    params: &PolicyParams,
    reference: &PolicyParams,
    seed: &SeedRollout,
    cfg: &TrainConfig,
    weight: f64,
    advantage: A,
) -> Result<SeedObjective, TrainError>
where
    A: Fn(usize, usize, usize) -> Option<f64>,
{
    let (m, n) = (seed.num_variants(), seed.samples_per_variant());
    let mut gradient = vec![0.0; params.weights().len()];
    let mut out = SeedObjective {
        surrogate: 0.0,
        gradient: Vec::new(),
        terms: 0,
        clipped: 0,
        max_dev: 0.0,
        kl: 0.0,
    };
    for (k, x) in seed.features.iter().enumerate() {
        let dist = PositionDistributions::new(params, x, cfg.temperature)?;
        let probs: Vec<Vec<f64>> = (0..params.seq_len()).map(|l| dist.probs(l)).collect();
        let mut dlogits = vec![vec![0.0; params.vocab()]; params.seq_len()];
        let mut coeff_total = 0.0;
        for (j, row) in seed.trajectories.iter().enumerate() {
            for (i, traj) in row.iter().enumerate() {
                let Some(adv) = advantage(j, i, k) else {
                    continue;
                };
                let ratio = (dist.sequence_logprob(&traj.tokens) - seed.old_logprob(j, i, k)).exp();
                let (value, coeff, clipped) = clipped_term(ratio, adv, cfg.clip_eps);
                out.surrogate += weight * value;
                out.terms += 1;
                out.clipped += clipped as usize;
                out.max_dev = out.max_dev.max((ratio - 1.0).abs());
                if coeff != 0.0 {
                    let c = weight * coeff;
                    coeff_total += c;
                    for (l, tok) in traj.tokens.iter().enumerate() {
                        dlogits[l][tok.index()] += c;
                    }
                }
            }
        }
        if coeff_total != 0.0 {
            // Σ c (e_tok − p) = Σ c e_tok − (Σ c) p, per position.
            for (row, p) in dlogits.iter_mut().zip(&probs) {
                for (d, pv) in row.iter_mut().zip(p) {
                    *d -= coeff_total * pv;
                }
            }
            accumulate_outer(params, &mut gradient, &dlogits, x, 1.0 / cfg.temperature);
        }
        if cfg.kl_beta > 0.0 {
            let (kl, kl_grad) = kl_with_grad(params, reference, x, cfg.temperature)?;
            out.kl += kl / m as f64;
            let scale = -cfg.kl_beta / m as f64;
            for (g, kg) in gradient.iter_mut().zip(&kl_grad) {
                *g += scale * kg;
            }
        }
    }
    let _ = n;
    out.gradient = gradient;
    Ok(out)
}

fn reduce(parts: Vec<SeedObjective>, cfg: &TrainConfig, len: usize) -> ObjectiveValue {
    let seeds = parts.len();
    if seeds == 0 {
        return ObjectiveValue {
            objective: 0.0,
            gradient: vec![0.0; len],
            clip_fraction: 0.0,
            max_ratio_deviation: 0.0,
            mean_kl: 0.0,
        };
    }
    let inv = 1.0 / seeds as f64;
    let mut gradient = vec![0.0; len];
    let (mut surrogate, mut kl, mut terms, mut clipped, mut max_dev) = (0.0, 0.0, 0, 0, 0.0f64);
    for part in &parts {
        for (g, pg) in gradient.iter_mut().zip(&part.gradient) {
            *g += pg;
        }
        surrogate += part.surrogate;
        kl += part.kl;
        terms += part.terms;
        clipped += part.clipped;
        max_dev = max_dev.max(part.max_dev);
    }
    gradient.iter_mut().for_each(|g| *g *= inv);
    let mean_kl = kl * inv;
    ObjectiveValue {
        objective: surrogate * inv - cfg.kl_beta * mean_kl,
        gradient,
        clip_fraction: if terms == 0 {
            0.0
        } else {
            clipped as f64 / terms as f64
        },
        max_ratio_deviation: max_dev,
        mean_kl,
    }
}

/// Clipped GRPO surrogate with KL penalty, averaged over responses and seeds.
///
/// Each response is scored only under the variant that generated it.
pub fn grpo_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    round: &RolloutRound,
    cfg: &TrainConfig,
) -> Result<ObjectiveValue, TrainError> {
    let parts = round
        .seeds
        .par_iter()
        .map(|seed| {
            check_snapshot(round, seed)?;
            let SeedAdvantages::Group(adv) = &seed.advantages else {
                return Err(TrainError::WrongAdvantageKind { expected: "group" });
            };
            let weight = 1.0 / (seed.num_variants() * seed.samples_per_variant()) as f64;
            seed_objective(params, reference, seed, cfg, weight, |j, i, k| {
                (j == k).then(|| adv[j][i])
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(reduce(parts, cfg, params.weights().len()))
}

/// Shared objective: every trajectory of a seed is scored under every
/// variant with the hierarchical advantage, normalized by `1/(n·m²)`.
pub fn share_grpo_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    round: &RolloutRound,
    cfg: &TrainConfig,
) -> Result<ObjectiveValue, TrainError> {
    let parts = round
        .seeds
        .par_iter()
        .map(|seed| {
            check_snapshot(round, seed)?;
            let SeedAdvantages::Hierarchical(adv) = &seed.advantages else {
                return Err(TrainError::WrongAdvantageKind {
                    expected: "hierarchical",
                });
            };
            let m = seed.num_variants();
            let weight = 1.0 / (seed.samples_per_variant() * m * m) as f64;
            seed_objective(params, reference, seed, cfg, weight, |j, i, k| {
                Some(adv.hier(j, i, k))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(reduce(parts, cfg, params.weights().len()))
}

pub fn objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    round: &RolloutRound,
    cfg: &TrainConfig,
) -> Result<ObjectiveValue, TrainError> {
    match cfg.algo {
        Algo::Grpo => grpo_objective(params, reference, round, cfg),
        Algo::ShareGrpo => share_grpo_objective(params, reference, round, cfg),
    }
}

/// Runtime knobs that must not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

/// Output of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub initial_params: PolicyParams,
    pub final_params: PolicyParams,
    pub initial_eval_accuracy: f64,
    pub metrics: Vec<StepMetrics>,
}

/// A run that stopped on a non-finite objective, with everything logged so far.
#[derive(Debug)]
pub struct Diverged {
    pub error: TrainError,
    pub metrics: Vec<StepMetrics>,
}

pub fn train(cfg: &TrainConfig, opts: TrainOptions) -> Result<RunArtifacts, TrainError> {
    train_with_diagnostics(cfg, opts).map_err(|d| d.error)
}

/// Like [`train`], but a failure keeps the metrics recorded before it.
pub fn train_with_diagnostics(
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<RunArtifacts, Diverged> {
    let no_metrics = |error: TrainError| Diverged {
        error,
        metrics: Vec::new(),
    };
    cfg.validate().map_err(|e| no_metrics(e.into()))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| no_metrics(TrainError::ThreadPool(e.to_string())))?;
    pool.install(|| run_loop(cfg))
}

fn run_loop(cfg: &TrainConfig) -> Result<RunArtifacts, Diverged> {
    let mut metrics_log: Vec<StepMetrics> = Vec::with_capacity(cfg.steps);
    macro_rules! tryd {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => {
                    return Err(Diverged {
                        error: e.into(),
                        metrics: metrics_log,
                    })
                }
            }
        };
    }
    let task = tryd!(TaskSetup::new(cfg.grid_dim));
    if cfg.m > task.env.bank().len() {
        tryd!(Err(ConfigError::Invariant(format!(
            "m = {} exceeds the paraphrase bank size {}",
            cfg.m,
            task.env.bank().len()
        ))));
    }
    let initial = task.initial_params(cfg.rng_seed);
    let reference = initial.clone();
    let mut params = initial.clone();
    let eval_questions = tryd!(eval_set(cfg.eval_seed, cfg.eval_size, cfg.grid_dim));
    let initial_eval_accuracy = tryd!(metrics::eval_accuracy(
        &params,
        &task.layout,
        &eval_questions
    ));

    for step in 0..cfg.steps {
        let batch = tryd!(seed_batch(cfg, step));
        let round = tryd!(rollout_round(&params, cfg, &task, &batch, step));
        let mean_reward = metrics::mean_reward(&round);
        let reward_density = metrics::reward_density(&round);
        let valid_pooled = metrics::valid_advantage_ratio(&round, Grouping::Pooled);
        let valid_local = metrics::valid_advantage_ratio(&round, Grouping::PerVariant);
        let mean_kl = tryd!(metrics::mean_kl(
            &params,
            &reference,
            &round,
            cfg.temperature
        ));

        let round = if cfg.dynamic_sampling {
            dynamic_sampling_filter(round)
        } else {
            round
        };
        let mut clip_sum = 0.0;
        if round.seeds.is_empty() {
            log::warn!("step {step}: dynamic sampling left no seeds; skipping update");
        } else {
            for epoch in 0..cfg.ppo_epochs {
                let value = tryd!(objective(&params, &reference, &round, cfg));
                let reason = if !value.objective.is_finite() {
                    Some(format!("objective is {}", value.objective))
                } else if value.gradient.iter().any(|g| !g.is_finite()) {
                    Some("gradient has non-finite entries".to_string())
                } else {
                    None
                };
                if let Some(reason) = reason {
                    tryd!(Err(TrainError::Divergence {
                        step,
                        epoch,
                        reason
                    }));
                }
                clip_sum += value.clip_fraction;
                params.add_scaled(&value.gradient, cfg.learning_rate);
                if !params.is_finite() {
                    tryd!(Err(TrainError::Divergence {
                        step,
                        epoch,
                        reason: "parameters overflowed".to_string(),
                    }));
                }
            }
        }
        let eval_accuracy = tryd!(metrics::eval_accuracy(
            &params,
            &task.layout,
            &eval_questions
        ));
        metrics_log.push(StepMetrics {
            step,
            mean_reward,
            reward_density,
            valid_adv_ratio_pooled: valid_pooled,
            valid_adv_ratio_local: valid_local,
            eval_accuracy,
            mean_kl,
            clip_fraction: clip_sum / cfg.ppo_epochs as f64,
            dropped_seeds: round.dropped_seeds,
        });
    }
    Ok(RunArtifacts {
        initial_params: initial,
        final_params: params,
        initial_eval_accuracy,
        metrics: metrics_log,
    })
}

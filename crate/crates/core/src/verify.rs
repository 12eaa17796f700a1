//! Runtime property checks behind `sharegrpo verify`.
//!
//! Each check draws its own seeded instances, so a report is reproducible from
//! its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advantage::{grpo_advantage, hierarchical_advantage, mean_std};
use crate::env::generate_question;
use crate::metrics::{valid_advantage_ratio, Grouping};
use crate::policy::{grad_logprob, logprob, PolicyInit, PolicyParams, Token, SEQ_LEN, VOCAB_SIZE};
use crate::reward::RewardTensor;
use crate::trainer::{
    derive_seed, grpo_objective, rollout_round, seed_batch, share_grpo_objective, train, Algo,
    RolloutRound, TaskSetup, TrainConfig, TrainError, TrainOptions,
};

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Outcome = Result<String, String>;
type NamedCheck = (&'static str, Box<dyn Fn() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs every check with instance counts scaled by `cases`.
pub fn run_all(seed: u64, cases: usize) -> Report {
    let cases = cases.max(1);
    let checks: Vec<NamedCheck> = vec![
        (
            "transform_answer_invariance",
            Box::new(move || transforms(seed, cases)),
        ),
        (
            "variant_consistency",
            Box::new(move || variants(seed, cases)),
        ),
        (
            "advantage_standardization",
            Box::new(move || advantages(seed, cases)),
        ),
        (
            "logprob_gradient",
            Box::new(move || logprob_gradient(seed, cases)),
        ),
        (
            "objective_gradients",
            Box::new(move || objective_gradients(seed, cases)),
        ),
        ("ratio_one_at_snapshot", Box::new(move || ratio_one(seed))),
        (
            "pooled_validity_dominates",
            Box::new(move || validity(seed)),
        ),
        (
            "thread_count_determinism",
            Box::new(move || determinism(seed)),
        ),
    ];
    let checks = checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
            }
        })
        .collect();
    Report { seed, checks }
}

fn transforms(seed: u64, cases: usize) -> Outcome {
    let task = TaskSetup::new(3).map_err(err)?;
    let n = cases * 10;
    for i in 0..n {
        let q = generate_question(derive_seed(seed, &[1, i as u64]), 3).map_err(err)?;
        for spec in task.env.registry().specs() {
            let t = spec.apply(&q).map_err(err)?;
            ensure(
                t.answer == q.answer && t.recompute_answer() == q.answer,
                || format!("{spec} changed the answer of question {i}"),
            )?;
        }
    }
    Ok(format!(
        "{n} questions x {} transforms",
        task.env.registry().len()
    ))
}

fn variants(seed: u64, cases: usize) -> Outcome {
    let task = TaskSetup::new(3).map_err(err)?;
    for i in 0..cases {
        let s = derive_seed(seed, &[2, i as u64]);
        let q = generate_question(s, 3).map_err(err)?;
        let vs = task.env.expand_offline(s, &q, 4).map_err(err)?;
        let vs = task.env.expand_online(&vs, 1.0, s).map_err(err)?;
        ensure(
            vs.variants
                .iter()
                .all(|v| v.is_consistent() && v.answer == q.answer),
            || format!("variant set {i} is inconsistent"),
        )?;
    }
    Ok(format!("{cases} variant sets, m=4, p=1"))
}

fn advantages(seed: u64, cases: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let levels = [0.0, 0.5, 1.5];
    for _ in 0..cases {
        let m = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=4);
        let values: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| levels[rng.gen_range(0..3)]).collect())
            .collect();
        let adv =
            hierarchical_advantage(&RewardTensor::from_values(values.clone())).map_err(err)?;
        let pooled: Vec<f64> = adv.global.iter().flatten().copied().collect();
        if !adv.pooled_degenerate {
            let (mu, sd) = mean_std(&pooled);
            ensure(mu.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, || {
                format!("global advantages of {values:?} have mean {mu}, std {sd}")
            })?;
        }
        for j in 0..m {
            for i in 0..n {
                for k in 0..m {
                    let want = adv.global[j][i] + if j == k { adv.local[j][i] } else { 0.0 };
                    ensure(adv.hier(j, i, k) == want, || {
                        format!("hier mismatch for {values:?}")
                    })?;
                }
            }
        }
        if m == 1 {
            let g = grpo_advantage(&values[0]).map_err(err)?;
            ensure((0..n).all(|i| adv.hier(0, i, 0) == 2.0 * g[i]), || {
                "m=1 hierarchical advantage is not twice the group advantage".into()
            })?;
        }
    }
    Ok(format!("{cases} random reward tensors"))
}

fn random_params(task: &TaskSetup, seed: u64) -> PolicyParams {
    let init = PolicyInit {
        noise: 0.5,
        ..PolicyInit::default()
    };
    PolicyParams::initial(&task.layout, &init, seed)
}

/// Worst relative error between `analytic · d` and a central difference of
/// `f` along `d`, over a few random directions.
fn directional_error<F>(
    params: &PolicyParams,
    analytic: &[f64],
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<f64, String>
where
    F: Fn(&PolicyParams) -> Result<f64, String>,
{
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let d: Vec<f64> = (0..analytic.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut plus = params.clone();
        plus.add_scaled(&d, FD_STEP);
        let mut minus = params.clone();
        minus.add_scaled(&d, -FD_STEP);
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * FD_STEP);
        let exact: f64 = analytic.iter().zip(&d).map(|(a, b)| a * b).sum();
        let scale = numeric.abs().max(exact.abs()).max(1e-6);
        worst = worst.max((numeric - exact).abs() / scale);
    }
    Ok(worst)
}

fn logprob_gradient(seed: u64, cases: usize) -> Outcome {
    let task = TaskSetup::new(3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let mut worst = 0.0f64;
    for i in 0..cases {
        let params = random_params(&task, derive_seed(seed, &[4, i as u64]));
        let q = generate_question(rng.gen(), 3).map_err(err)?;
        let x = task.layout.featurize(&q).map_err(err)?;
        let tokens: Vec<Token> = (0..SEQ_LEN)
            .map(|_| Token(rng.gen_range(0..VOCAB_SIZE as u8)))
            .collect();
        let t = rng.gen_range(0.3..1.5);
        let g = grad_logprob(&params, &x, &tokens, t).map_err(err)?;
        worst = worst.max(directional_error(&params, &g, &mut rng, |p| {
            logprob(p, &x, &tokens, t).map_err(err)
        })?);
    }
    ensure(worst <= FD_TOLERANCE, || {
        format!("worst relative error {worst:.3e}")
    })?;
    Ok(format!(
        "{cases} instances, worst relative error {worst:.3e}"
    ))
}

/// A small live round plus parameters moved away from its snapshot, so that
/// ratios differ from one.
fn perturbed_round(
    seed: u64,
    algo: Algo,
    i: usize,
) -> Result<(TrainConfig, PolicyParams, PolicyParams, RolloutRound), String> {
    let task = TaskSetup::new(3).map_err(err)?;
    let cfg = TrainConfig {
        batch_seed_questions: 2,
        n: 3,
        p: 0.5,
        kl_beta: 0.05,
        rng_seed: derive_seed(seed, &[5, i as u64]),
        ..TrainConfig::new(algo)
    };
    let snapshot = random_params(&task, cfg.rng_seed);
    let batch = seed_batch(&cfg, 0).map_err(err)?;
    let round = rollout_round(&snapshot, &cfg, &task, &batch, 0).map_err(err)?;
    let mut params = snapshot.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise: Vec<f64> = (0..params.weights().len())
        .map(|_| rng.gen_range(-0.02..0.02))
        .collect();
    params.add_scaled(&noise, 1.0);
    Ok((cfg, snapshot, params, round))
}

fn objective_gradients(seed: u64, cases: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[6]));
    let mut worst = 0.0f64;
    for algo in [Algo::Grpo, Algo::ShareGrpo] {
        for i in 0..cases {
            let (cfg, reference, params, round) = perturbed_round(seed, algo, i)?;
            let eval = |p: &PolicyParams| -> Result<f64, TrainError> {
                Ok(match algo {
                    Algo::Grpo => grpo_objective(p, &reference, &round, &cfg)?,
                    Algo::ShareGrpo => share_grpo_objective(p, &reference, &round, &cfg)?,
                }
                .objective)
            };
            let analytic = match algo {
                Algo::Grpo => grpo_objective(&params, &reference, &round, &cfg),
                Algo::ShareGrpo => share_grpo_objective(&params, &reference, &round, &cfg),
            }
            .map_err(err)?
            .gradient;
            worst = worst.max(directional_error(&params, &analytic, &mut rng, |p| {
                eval(p).map_err(err)
            })?);
        }
    }
    ensure(worst <= FD_TOLERANCE, || {
        format!("worst relative error {worst:.3e}")
    })?;
    Ok(format!(
        "{cases} rounds per objective, worst relative error {worst:.3e}"
    ))
}

fn ratio_one(seed: u64) -> Outcome {
    for algo in [Algo::Grpo, Algo::ShareGrpo] {
        let (cfg, snapshot, _, round) = perturbed_round(seed, algo, 0)?;
        let value = match algo {
            Algo::Grpo => grpo_objective(&snapshot, &snapshot, &round, &cfg),
            Algo::ShareGrpo => share_grpo_objective(&snapshot, &snapshot, &round, &cfg),
        }
        .map_err(err)?;
        ensure(
            value.max_ratio_deviation <= 1e-12 && value.clip_fraction == 0.0,
            || {
                format!(
                    "{algo:?}: max |ratio - 1| = {:.3e}, clip fraction {}",
                    value.max_ratio_deviation, value.clip_fraction
                )
            },
        )?;
    }
    Ok("both objectives".into())
}

fn validity(seed: u64) -> Outcome {
    let task = TaskSetup::new(3).map_err(err)?;
    let cfg = TrainConfig {
        rng_seed: seed,
        ..TrainConfig::new(Algo::ShareGrpo)
    };
    let params = task.initial_params(seed);
    for step in 0..5 {
        let batch = seed_batch(&cfg, step).map_err(err)?;
        let round = rollout_round(&params, &cfg, &task, &batch, step).map_err(err)?;
        let pooled = valid_advantage_ratio(&round, Grouping::Pooled);
        let local = valid_advantage_ratio(&round, Grouping::PerVariant);
        ensure(pooled >= local, || {
            format!("step {step}: pooled {pooled} < per-variant {local}")
        })?;
    }
    Ok("5 live rounds".into())
}

fn determinism(seed: u64) -> Outcome {
    let cfg = TrainConfig {
        steps: 3,
        batch_seed_questions: 8,
        eval_size: 50,
        rng_seed: seed,
        ..TrainConfig::new(Algo::ShareGrpo)
    };
    let a = train(&cfg, TrainOptions { threads: Some(1) }).map_err(err)?;
    let b = train(&cfg, TrainOptions { threads: Some(4) }).map_err(err)?;
    ensure(a == b, || "runs with 1 and 4 threads differ".into())?;
    Ok("3-step runs with 1 and 4 threads agree".into())
}

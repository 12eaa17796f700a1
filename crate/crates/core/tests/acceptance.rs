//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharegrpo_core::advantage::{
    global_advantage, grpo_advantage, hierarchical_advantage, local_advantage,
};
use sharegrpo_core::env::{generate_question, Question, TransformKind};
use sharegrpo_core::metrics::{self, valid_advantage_ratio, Grouping, StepMetrics};
use sharegrpo_core::policy::{
    grad_logprob, logprob, PolicyInit, PolicyParams, Token, SEQ_LEN, VOCAB_SIZE,
};
use sharegrpo_core::reward::RewardTensor;
use sharegrpo_core::run;
use sharegrpo_core::trainer::{
    grpo_objective, rollout_round, seed_batch, share_grpo_objective, train, Algo, RolloutRound,
    TaskKind, TaskSetup, TrainConfig, TrainOptions,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("{what} took {t:?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- oracles

fn oracle_standardize(values: &[f64], reference: &[f64]) -> Vec<f64> {
    let max = reference.iter().cloned().fold(f64::MIN, f64::max);
    let min = reference.iter().cloned().fold(f64::MAX, f64::min);
    if max == min {
        return vec![0.0; values.len()];
    }
    let n = reference.len() as f64;
    let mut mean = 0.0;
    for r in reference {
        mean += r;
    }
    mean /= n;
    let mut var = 0.0;
    for r in reference {
        var += (r - mean) * (r - mean);
    }
    let std = (var / n).sqrt().max(1e-6);
    values.iter().map(|r| (r - mean) / std).collect()
}

/// Every `m × n` tensor with `m, n ≤ 3` and entries in {0, 0.5, 1.5}.
fn exhaustive_grid() -> Vec<Vec<Vec<f64>>> {
    let levels = [0.0, 0.5, 1.5];
    let mut out = Vec::new();
    for m in 1..=3usize {
        for n in 1..=3usize {
            let cells = m * n;
            for code in 0..3usize.pow(cells as u32) {
                let mut c = code;
                let flat: Vec<f64> = (0..cells)
                    .map(|_| {
                        let v = levels[c % 3];
                        c /= 3;
                        v
                    })
                    .collect();
                out.push(flat.chunks(n).map(|r| r.to_vec()).collect());
            }
        }
    }
    out
}

fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sum of the line the target index names, tracked through the tags.
fn oracle_line_sum(q: &Question) -> u8 {
    let transposed = q
        .tau_tags
        .iter()
        .filter(|t| t.kind == TransformKind::Transpose)
        .count()
        % 2
        == 1;
    let d = q.grid.len();
    let s: u32 = (0..d)
        .map(|c| {
            if transposed {
                q.grid[c][q.target_row] as u32
            } else {
                q.grid[q.target_row][c] as u32
            }
        })
        .sum();
    (s % 10) as u8
}

// -------------------------------------------------------------- run cache

#[derive(Default)]
struct Runs {
    cache: HashMap<String, (Vec<StepMetrics>, f64)>,
}

impl Runs {
    /// Metrics and initial eval accuracy for a config, trained at most once.
    fn get(&mut self, cfg: &TrainConfig) -> Result<&(Vec<StepMetrics>, f64), String> {
        let key = serde_json::to_string(cfg).unwrap();
        if !self.cache.contains_key(&key) {
            let run = train(cfg, TrainOptions::default()).map_err(|e| e.to_string())?;
            self.cache
                .insert(key.clone(), (run.metrics, run.initial_eval_accuracy));
        }
        Ok(&self.cache[&key])
    }

    fn final_acc(&mut self, cfg: &TrainConfig) -> Result<f64, String> {
        Ok(self.get(cfg)?.0.last().map_or(0.0, |m| m.eval_accuracy))
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn share(m: usize, n: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        m,
        n,
        p: 0.3,
        steps: 300,
        rng_seed: seed,
        ..TrainConfig::new(Algo::ShareGrpo)
    }
}

fn grpo(n: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        m: 1,
        n,
        p: 0.0,
        steps: 300,
        rng_seed: seed,
        ..TrainConfig::new(Algo::Grpo)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let mu = mean(v);
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (var / v.len() as f64).sqrt()
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

// ------------------------------------------------------------- criteria

fn c1_advantage_exactness(_: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let grid = exhaustive_grid();
    for values in &grid {
        let t = RewardTensor::from_values(values.clone());
        let pooled: Vec<f64> = values.iter().flatten().copied().collect();
        let want_global: Vec<Vec<f64>> = values
            .iter()
            .map(|r| oracle_standardize(r, &pooled))
            .collect();
        let want_local: Vec<Vec<f64>> = values.iter().map(|r| oracle_standardize(r, r)).collect();

        let (global, _) = global_advantage(&t).map_err(|e| e.to_string())?;
        let (local, _) = local_advantage(&t).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(&global, &want_global));
        worst = worst.max(max_abs(&local, &want_local));
        for row in values {
            let g = grpo_advantage(row).map_err(|e| e.to_string())?;
            worst = worst.max(max_abs(&[g], &[oracle_standardize(row, row)]));
        }
        let h = hierarchical_advantage(&t).map_err(|e| e.to_string())?;
        let (m, n) = (values.len(), values[0].len());
        for j in 0..m {
            for i in 0..n {
                for k in 0..m {
                    let want = want_global[j][i] + if j == k { want_local[j][i] } else { 0.0 };
                    worst = worst.max((h.hier(j, i, k) - want).abs());
                }
            }
        }
    }
    check(worst < 1e-12, || format!("max abs error {worst:e}"))?;

    let ex = RewardTensor::from_values(vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
    let h = hierarchical_advantage(&ex).map_err(|e| e.to_string())?;
    let round6 = |x: f64| (x * 1e6).round() / 1e6;
    check(round6(h.global[0][0]) == 0.577350, || {
        format!("global {}", h.global[0][0])
    })?;
    check(round6(h.global[1][0]) == -1.732051, || {
        format!("global {}", h.global[1][0])
    })?;
    check(round6(h.hier(1, 1, 1)) == 1.577350, || {
        format!("hier {}", h.hier(1, 1, 1))
    })?;
    within(start, Duration::from_secs(5), "advantage grid")?;
    Ok(format!(
        "{} tensors, max abs error {worst:.1e}, worked example ok, {:.2?}",
        grid.len(),
        start.elapsed()
    ))
}

fn c2_hier_structure(_: &mut Runs) -> Outcome {
    let grid = exhaustive_grid();
    for values in &grid {
        let t = RewardTensor::from_values(values.clone());
        let h = hierarchical_advantage(&t).map_err(|e| e.to_string())?;
        let (m, n) = (values.len(), values[0].len());
        for j in 0..m {
            for i in 0..n {
                let off: Vec<f64> = (0..m)
                    .filter(|&k| k != j)
                    .map(|k| h.hier(j, i, k))
                    .collect();
                check(off.windows(2).all(|w| w[0] == w[1]), || {
                    format!("off-diagonal not constant for {values:?}")
                })?;
                if let Some(&o) = off.first() {
                    check(o == h.global[j][i], || {
                        format!("off-diagonal != global for {values:?}")
                    })?;
                }
                check(h.hier(j, i, j) == h.global[j][i] + h.local[j][i], || {
                    format!("diagonal != global + local for {values:?}")
                })?;
            }
        }
        if m == 1 {
            let g = grpo_advantage(&values[0]).map_err(|e| e.to_string())?;
            check((0..n).all(|i| h.hier(0, i, 0) == 2.0 * g[i]), || {
                format!("m=1 hier != 2x group advantage for {values:?}")
            })?;
        }
    }
    Ok(format!("{} tensors", grid.len()))
}

const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;

fn fd_rel_error(exact: f64, numeric: f64) -> f64 {
    (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-7)
}

/// Compares the analytic gradient with central differences along a few
/// random directions and a few individual coordinates.
fn fd_compare<F>(params: &PolicyParams, grad: &[f64], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut worst = 0.0f64;
    for _ in 0..2 {
        let d: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut p, mut q) = (params.clone(), params.clone());
        p.add_scaled(&d, FD_STEP);
        q.add_scaled(&d, -FD_STEP);
        let numeric = (f(&p) - f(&q)) / (2.0 * FD_STEP);
        let exact: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
        worst = worst.max(fd_rel_error(exact, numeric));
    }
    // Coordinates with the largest analytic entries, where errors would show.
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    for &i in idx.iter().take(3) {
        let (mut p, mut q) = (params.clone(), params.clone());
        p.weights_mut()[i] += FD_STEP;
        q.weights_mut()[i] -= FD_STEP;
        let numeric = (f(&p) - f(&q)) / (2.0 * FD_STEP);
        worst = worst.max(fd_rel_error(grad[i], numeric));
    }
    worst
}

fn noisy_params(task: &TaskSetup, seed: u64) -> PolicyParams {
    let init = PolicyInit {
        noise: 0.5,
        ..PolicyInit::default()
    };
    PolicyParams::initial(&task.layout, &init, seed)
}

fn c3_gradient_fidelity(_: &mut Runs) -> Outcome {
    let start = Instant::now();
    let task = TaskSetup::new(3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);

    let mut worst_lp = 0.0f64;
    for i in 0..100u64 {
        let params = noisy_params(&task, 1000 + i);
        let q = generate_question(rng.gen(), 3).map_err(|e| e.to_string())?;
        let x = task.layout.featurize(&q).map_err(|e| e.to_string())?;
        let tokens: Vec<Token> = (0..SEQ_LEN)
            .map(|_| Token(rng.gen_range(0..VOCAB_SIZE as u8)))
            .collect();
        let t = rng.gen_range(0.3..1.5);
        let g = grad_logprob(&params, &x, &tokens, t).map_err(|e| e.to_string())?;
        worst_lp = worst_lp.max(fd_compare(&params, &g, &mut rng, |p| {
            logprob(p, &x, &tokens, t).unwrap()
        }));
    }

    let mut worst = [0.0f64; 2];
    for (slot, algo) in [Algo::Grpo, Algo::ShareGrpo].into_iter().enumerate() {
        for i in 0..100u64 {
            let cfg = TrainConfig {
                m: 1 + (i % 3) as usize,
                n: 2 + (i % 3) as usize,
                p: 0.5,
                batch_seed_questions: 2,
                kl_beta: if algo == Algo::Grpo { 0.05 } else { 0.0 },
                rng_seed: 5000 + i,
                ..TrainConfig::new(algo)
            };
            let reference = noisy_params(&task, 7000 + i);
            let snapshot = noisy_params(&task, 9000 + i);
            let batch = seed_batch(&cfg, 0).map_err(|e| e.to_string())?;
            let round =
                rollout_round(&snapshot, &cfg, &task, &batch, 0).map_err(|e| e.to_string())?;
            let mut params = snapshot.clone();
            let shift: Vec<f64> = (0..params.weights().len())
                .map(|_| rng.gen_range(-0.03..0.03))
                .collect();
            params.add_scaled(&shift, 1.0);
            let eval = |p: &PolicyParams| match algo {
                Algo::Grpo => grpo_objective(p, &reference, &round, &cfg),
                Algo::ShareGrpo => share_grpo_objective(p, &reference, &round, &cfg),
            };
            let g = eval(&params).map_err(|e| e.to_string())?.gradient;
            worst[slot] = worst[slot].max(fd_compare(&params, &g, &mut rng, |p| {
                eval(p).unwrap().objective
            }));
        }
    }
    check(worst_lp <= FD_RTOL, || {
        format!("logprob rel error {worst_lp:e}")
    })?;
    check(worst[0] <= FD_RTOL, || {
        format!("grpo objective rel error {:e}", worst[0])
    })?;
    check(worst[1] <= FD_RTOL, || {
        format!("share objective rel error {:e}", worst[1])
    })?;
    within(start, Duration::from_secs(60), "gradient checks")?;
    Ok(format!(
        "worst rel error logprob {worst_lp:.1e}, grpo {:.1e}, share {:.1e}, {:.1?}",
        worst[0],
        worst[1],
        start.elapsed()
    ))
}

fn c4_ratio_one(_: &mut Runs) -> Outcome {
    let task = TaskSetup::new(3).map_err(|e| e.to_string())?;
    let mut terms = 0usize;
    let mut worst = 0.0f64;
    for algo in [Algo::Grpo, Algo::ShareGrpo] {
        for seed in 0..5u64 {
            let cfg = TrainConfig {
                ppo_epochs: 1,
                rng_seed: seed,
                ..TrainConfig::new(algo)
            };
            let params = noisy_params(&task, 40 + seed);
            let batch = seed_batch(&cfg, 3).map_err(|e| e.to_string())?;
            let round =
                rollout_round(&params, &cfg, &task, &batch, 3).map_err(|e| e.to_string())?;
            // Independent recomputation of every ratio at the snapshot.
            for s in &round.seeds {
                for (j, row) in s.trajectories.iter().enumerate() {
                    for (i, t) in row.iter().enumerate() {
                        for (k, x) in s.features.iter().enumerate() {
                            let lp = logprob(&params, x, &t.tokens, cfg.temperature)
                                .map_err(|e| e.to_string())?;
                            worst = worst.max(((lp - s.old_logprob(j, i, k)).exp() - 1.0).abs());
                            terms += 1;
                        }
                    }
                }
            }
            let value = match algo {
                Algo::Grpo => grpo_objective(&params, &params, &round, &cfg),
                Algo::ShareGrpo => share_grpo_objective(&params, &params, &round, &cfg),
            }
            .map_err(|e| e.to_string())?;
            check(value.clip_fraction == 0.0, || {
                format!("{algo:?} clip fraction {}", value.clip_fraction)
            })?;
            worst = worst.max(value.max_ratio_deviation);
        }
    }
    check(worst <= 1e-12, || format!("max |ratio - 1| = {worst:e}"))?;
    // A full single-epoch run never clips.
    let cfg = TrainConfig {
        steps: 20,
        ..TrainConfig::new(Algo::ShareGrpo)
    };
    let run = train(&cfg, TrainOptions::default()).map_err(|e| e.to_string())?;
    check(run.metrics.iter().all(|m| m.clip_fraction == 0.0), || {
        "clip_fraction nonzero in a ppo_epochs=1 run".into()
    })?;
    Ok(format!(
        "{terms} ratios, max |ratio - 1| {worst:.1e}, clip fraction 0"
    ))
}

fn c5_transform_safety(_: &mut Runs) -> Outcome {
    let task = TaskSetup::new(3).map_err(|e| e.to_string())?;
    let specs = task.env.registry().specs();
    let mut applied = 0usize;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
        for seed in 0..1000u64 {
            let q = generate_question(seed, 3).map_err(|e| e.to_string())?;
            let original: u8 =
                (q.grid[q.target_row].iter().map(|&d| d as u32).sum::<u32>() % 10) as u8;
            check(original == q.answer, || {
                format!("seed {seed}: stored answer wrong")
            })?;
            for spec in specs {
                let t = spec.apply(&q).map_err(|e| format!("{spec}: {e}"))?;
                check(oracle_line_sum(&t) == original, || {
                    format!("seed {seed}, {spec}: line sum changed")
                })?;
                check(
                    t.recompute_answer() == original && t.answer == original,
                    || format!("seed {seed}, {spec}: answer changed"),
                )?;
                applied += 1;
            }
        }
        Ok(())
    }));
    match result {
        Ok(r) => r?,
        Err(_) => return Err("panic while applying transforms".into()),
    }
    Ok(format!(
        "1000 questions x {} transforms = {applied} applications",
        specs.len()
    ))
}

fn c6_degeneracy_dominance(runs: &mut Runs) -> Outcome {
    // Brute force: swap each grid tensor into a live round skeleton.
    let task = TaskSetup::new(3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        m: 3,
        n: 3,
        batch_seed_questions: 3,
        ..TrainConfig::new(Algo::ShareGrpo)
    };
    let params = task.initial_params(0);
    let batch = seed_batch(&cfg, 0).map_err(|e| e.to_string())?;
    let skeleton = rollout_round(&params, &cfg, &task, &batch, 0).map_err(|e| e.to_string())?;
    let grid = exhaustive_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rounds = 0usize;
    let mut with = |tensors: Vec<&Vec<Vec<f64>>>| -> Result<(), String> {
        let mut round: RolloutRound = skeleton.clone();
        round.seeds.truncate(tensors.len());
        for (s, t) in round.seeds.iter_mut().zip(tensors) {
            s.rewards = RewardTensor::from_values(t.clone());
        }
        let pooled = valid_advantage_ratio(&round, Grouping::Pooled);
        let local = valid_advantage_ratio(&round, Grouping::PerVariant);
        rounds += 1;
        check(pooled >= local, || {
            format!("pooled {pooled} < per-variant {local}")
        })
    };
    for t in &grid {
        with(vec![t])?;
    }
    // Multi-seed rounds: every seed in a round shares one (m, n) shape.
    let mut by_shape: HashMap<(usize, usize), Vec<&Vec<Vec<f64>>>> = HashMap::new();
    for t in &grid {
        by_shape.entry((t.len(), t[0].len())).or_default().push(t);
    }
    let mut shapes: Vec<_> = by_shape.keys().copied().collect();
    shapes.sort();
    for _ in 0..20_000 {
        let group = &by_shape[&shapes[rng.gen_range(0..shapes.len())]];
        let pick: Vec<_> = (0..3)
            .map(|_| group[rng.gen_range(0..group.len())])
            .collect();
        with(pick)?;
    }
    let (metrics, _) = runs.get(&TrainConfig {
        steps: 50,
        ..share(2, 6, 0)
    })?;
    for m in metrics {
        check(m.valid_adv_ratio_pooled >= m.valid_adv_ratio_local, || {
            format!("live step {}: pooled < per-variant", m.step)
        })?;
    }
    Ok(format!(
        "{rounds} brute-force rounds, {} live rounds",
        metrics.len()
    ))
}

fn mean_of(metrics: &[StepMetrics], f: fn(&StepMetrics) -> f64) -> f64 {
    metrics.iter().map(f).sum::<f64>() / metrics.len() as f64
}

fn c7_denser_rewards(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut density_wins = 0;
    let mut valid_wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let s = runs.get(&share(2, 6, seed))?.0.clone();
        let g = runs.get(&grpo(12, seed))?.0.clone();
        let (sd, gd) = (
            mean_of(&s, |m| m.reward_density),
            mean_of(&g, |m| m.reward_density),
        );
        let (sv, gv) = (
            mean_of(&s, |m| m.valid_adv_ratio_pooled),
            mean_of(&g, |m| m.valid_adv_ratio_pooled),
        );
        density_wins += (sd > gd) as usize;
        valid_wins += (sv > gv) as usize;
        rows.push(format!(
            "s{seed} density {sd:.3}/{gd:.3} valid {sv:.3}/{gv:.3}"
        ));
    }
    within(start, Duration::from_secs(600), "criterion 7 runs")?;
    let detail = format!(
        "share/grpo: density wins {density_wins}/5, valid wins {valid_wins}/5; {}",
        rows.join("; ")
    );
    check(density_wins >= 4 && valid_wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn c8_variant_scaling(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut accs = Vec::new();
    for m in [1, 2, 4] {
        let v = SEEDS
            .iter()
            .map(|&s| runs.final_acc(&share(m, 6, s)))
            .collect::<Result<Vec<_>, _>>()?;
        accs.push(v);
    }
    within(start, Duration::from_secs(900), "criterion 8 runs")?;
    let means: Vec<f64> = accs.iter().map(|v| mean(v)).collect();
    let detail = format!(
        "m=1,2,4 final acc means {}, per seed {} {} {}",
        fmt_list(&means),
        fmt_list(&accs[0]),
        fmt_list(&accs[1]),
        fmt_list(&accs[2])
    );
    for w in 0..2 {
        // Tolerance: standard error of the difference of the two means.
        let band = (std_err(&accs[w]).powi(2) + std_err(&accs[w + 1]).powi(2)).sqrt();
        check(means[w + 1] >= means[w] - band, || detail.clone())?;
    }
    Ok(detail)
}

fn c9_performance_ceiling(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for n in [6, 12, 24] {
        let v = SEEDS
            .iter()
            .map(|&s| runs.final_acc(&grpo(n, s)))
            .collect::<Result<Vec<_>, _>>()?;
        means.push(mean(&v));
    }
    let share_v = SEEDS
        .iter()
        .map(|&s| runs.final_acc(&share(2, 6, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let share_mean = mean(&share_v);
    within(start, Duration::from_secs(1200), "criterion 9 runs")?;
    let (gain_a, gain_b) = (means[1] - means[0], means[2] - means[1]);
    let detail = format!(
        "grpo n=6,12,24 means {}, gains {gain_a:.3} then {gain_b:.3}; share(2,6) {share_mean:.3}",
        fmt_list(&means)
    );
    check(gain_b < gain_a && share_mean >= means[2], || detail.clone())?;
    Ok(detail)
}

fn c10_dynamic_sampling(runs: &mut Runs) -> Outcome {
    let mut plain = Vec::new();
    let mut filtered = Vec::new();
    let mut early_drops = Vec::new();
    for seed in SEEDS {
        plain.push(runs.final_acc(&share(2, 6, seed))?);
        filtered.push(runs.final_acc(&TrainConfig {
            dynamic_sampling: true,
            ..share(2, 6, seed)
        })?);
        let sparse = TrainConfig {
            dynamic_sampling: true,
            task: TaskKind::GridSumSparse,
            ..share(2, 6, seed)
        };
        let (metrics, _) = runs.get(&sparse)?;
        early_drops.push(
            metrics
                .iter()
                .take(20)
                .map(|m| m.dropped_seeds)
                .sum::<usize>(),
        );
    }
    let (p, f) = (mean(&plain), mean(&filtered));
    let detail = format!(
        "share {p:.3}, share+filter {f:.3}; sparse task seeds dropped in first 20 steps {early_drops:?}"
    );
    check(f >= p - 0.01 && early_drops.iter().all(|&d| d > 0), || {
        detail.clone()
    })?;
    Ok(detail)
}

fn csv_bytes(rows: &[StepMetrics]) -> Vec<u8> {
    let mut buf = Vec::new();
    metrics::write_csv(&mut buf, rows).unwrap();
    buf
}

fn baseline_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/baseline")
}

fn c11_determinism(_: &mut Runs) -> Outcome {
    let mut outputs = Vec::new();
    for algo in [Algo::Grpo, Algo::ShareGrpo] {
        let cfg = TrainConfig {
            steps: 25,
            dynamic_sampling: true,
            ..TrainConfig::new(algo)
        };
        let mut first: Option<Vec<u8>> = None;
        for threads in [1, 2, 3, 8] {
            let run = train(
                &cfg,
                TrainOptions {
                    threads: Some(threads),
                },
            )
            .map_err(|e| e.to_string())?;
            let bytes = csv_bytes(&run.metrics);
            match &first {
                None => first = Some(bytes),
                Some(f) => check(f == &bytes, || {
                    format!("{algo:?}: {threads} threads differ")
                })?,
            }
        }
        outputs.push(first.unwrap());
    }
    let committed = std::fs::read(baseline_dir().join(run::METRICS_FILE))
        .map_err(|e| format!("baseline metrics: {e}"))?;
    let cfg: TrainConfig =
        run::read_json(&baseline_dir().join(run::CONFIG_FILE)).map_err(|e| e.to_string())?;
    let rerun = train(&cfg, TrainOptions { threads: Some(2) }).map_err(|e| e.to_string())?;
    check(csv_bytes(&rerun.metrics) == committed, || {
        "baseline rerun differs from committed metrics.csv".into()
    })?;
    Ok(
        "grpo and share-grpo identical for 1/2/3/8 threads; baseline reproduced byte-for-byte"
            .into(),
    )
}

fn c12_learning_sanity(runs: &mut Runs) -> Outcome {
    let dir = baseline_dir();
    let loaded = run::load_run(&dir).map_err(|e| e.to_string())?;
    let cfg = &loaded.config;
    check(
        cfg.algo == Algo::ShareGrpo
            && cfg.m == 2
            && cfg.n == 6
            && cfg.rng_seed == 0
            && cfg.steps == 300,
        || format!("committed baseline has unexpected config {cfg:?}"),
    )?;
    let manifest: run::RunManifest =
        run::read_json(&dir.join(run::MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let initial = manifest
        .initial_eval_accuracy
        .ok_or("manifest lacks initial accuracy")?;
    let committed_final = loaded
        .metrics
        .last()
        .ok_or("empty baseline metrics")?
        .eval_accuracy;
    let (metrics, fresh_initial) = runs.get(cfg)?.clone();
    let fresh_final = metrics.last().ok_or("empty rerun")?.eval_accuracy;
    let detail = format!(
        "eval accuracy {initial:.3} -> {committed_final:.3} (rerun {fresh_initial:.3} -> {fresh_final:.3})"
    );
    check(initial <= 0.15 && fresh_initial == initial, || {
        detail.clone()
    })?;
    check(
        committed_final >= 0.8 && fresh_final == committed_final,
        || detail.clone(),
    )?;
    Ok(detail)
}

type Criterion = (u32, &'static str, fn(&mut Runs) -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "advantage exactness", c1_advantage_exactness),
        (2, "hierarchical advantage structure", c2_hier_structure),
        (3, "gradient fidelity", c3_gradient_fidelity),
        (4, "ratio-one identity", c4_ratio_one),
        (5, "transform safety", c5_transform_safety),
        (6, "degeneracy dominance", c6_degeneracy_dominance),
        (7, "denser rewards", c7_denser_rewards),
        (8, "variant scaling", c8_variant_scaling),
        (9, "performance ceiling", c9_performance_ceiling),
        (10, "dynamic sampling complementarity", c10_dynamic_sampling),
        (11, "end-to-end determinism", c11_determinism),
        (12, "learning sanity", c12_learning_sanity),
    ];
    let mut runs = Runs::default();
    let mut failed = 0;
    for (id, name, f) in criteria {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(|| f(&mut runs))) {
            Ok(r) => r,
            Err(_) => Err("panicked".to_string()),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use sharegrpo_core::env::TransformRegistry;
use sharegrpo_core::metrics::RunSummary;
use sharegrpo_core::run::{self, ExperimentSpec, RunError};
use sharegrpo_core::trainer::{
    train_with_diagnostics, Algo, TaskKind, TrainConfig, TrainConfigPatch, TrainError, TrainOptions,
};
use sharegrpo_core::verify;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_VERIFY: u8 = 4;
const EXIT_CONFLICT: u8 = 5;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "sharegrpo",
    version,
    about = "Train and compare GRPO / Share-GRPO runs"
)]
struct Cli {
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true, env = "SHARE_GRPO_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training job and write its run directory
    Train(TrainArgs),
    /// Summarize finished runs side by side
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Print JSON instead of a table
        #[arg(long)]
        json: bool,
    },
    /// Print the structural transforms registered for a grid size
    ListTransforms {
        #[arg(long, default_value_t = 3)]
        grid_dim: usize,
    },
    /// Run the built-in property checks
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per randomized check
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Run every config listed in an experiment file
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "BOOL")]
    dynamic_sampling: Option<bool>,
    /// Run directory (default: runs/<algo>-m<m>-n<n>-seed<seed>)
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn config_failure(e: anyhow::Error) -> Failure {
    Failure::new(EXIT_CONFIG, e)
}

fn run_failure(e: RunError) -> Failure {
    let code = match e {
        RunError::Exists(_) | RunError::DuplicateName(_) => EXIT_CONFLICT,
        _ => 1,
    };
    Failure::new(code, e)
}

fn train_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::Divergence { .. } => EXIT_DIVERGED,
        TrainError::Config(_) => EXIT_CONFIG,
        _ => 1,
    };
    Failure::new(code, e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let opts = TrainOptions {
        threads: cli.threads,
    };
    match cli.command {
        Command::Train(args) => cmd_train(args, opts),
        Command::Compare { runs, json } => cmd_compare(&runs, json),
        Command::ListTransforms { grid_dim } => cmd_list_transforms(grid_dim),
        Command::Verify { seed, cases } => cmd_verify(seed, cases),
        Command::Experiment { spec, out } => cmd_experiment(&spec, &out, opts),
    }
}

fn read_patch(path: &Path) -> anyhow::Result<TrainConfigPatch> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl TrainArgs {
    fn flag_patch(&self) -> anyhow::Result<TrainConfigPatch> {
        Ok(TrainConfigPatch {
            algo: self.algo.as_deref().map(str::parse::<Algo>).transpose()?,
            task: self
                .task
                .as_deref()
                .map(str::parse::<TaskKind>)
                .transpose()?,
            m: self.m,
            n: self.n,
            p: self.p,
            temperature: self.temperature,
            steps: self.steps,
            rng_seed: self.seed,
            dynamic_sampling: self.dynamic_sampling,
            ..Default::default()
        })
    }

    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let file = match &self.config {
            Some(path) => read_patch(path)?,
            None => TrainConfigPatch::default(),
        };
        Ok(file.overlay(self.flag_patch()?).resolve()?)
    }
}

fn default_run_dir(cfg: &TrainConfig) -> PathBuf {
    let algo = match cfg.algo {
        Algo::Grpo => "grpo",
        Algo::ShareGrpo => "share-grpo",
    };
    PathBuf::from("runs").join(format!("{algo}-m{}-n{}-seed{}", cfg.m, cfg.n, cfg.rng_seed))
}

fn train_into(dir: &Path, cfg: &TrainConfig, opts: TrainOptions) -> Result<(), Failure> {
    if run::is_run_dir(dir) {
        return Err(run_failure(RunError::Exists(dir.to_path_buf())));
    }
    let started = chrono::Utc::now();
    match train_with_diagnostics(cfg, opts) {
        Ok(artifacts) => {
            let manifest =
                run::write_completed(dir, cfg, &artifacts, started).map_err(run_failure)?;
            println!(
                "{}: {} steps, eval accuracy {:.3} -> {:.3}",
                dir.display(),
                manifest.steps_completed,
                artifacts.initial_eval_accuracy,
                manifest
                    .final_eval_accuracy
                    .unwrap_or(artifacts.initial_eval_accuracy),
            );
            Ok(())
        }
        Err(failure) => {
            if matches!(failure.error, TrainError::Divergence { .. }) {
                run::write_diverged(dir, cfg, &failure, started).map_err(run_failure)?;
            }
            Err(train_failure(failure.error))
        }
    }
}

fn cmd_train(args: TrainArgs, opts: TrainOptions) -> Result<(), Failure> {
    let cfg = args.resolve().map_err(config_failure)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    train_into(&dir, &cfg, opts)
}

fn cmd_compare(dirs: &[PathBuf], json: bool) -> Result<(), Failure> {
    let mut rows: Vec<(String, TrainConfig, RunSummary)> = Vec::new();
    for dir in dirs {
        let loaded = run::load_run(dir).map_err(|e| Failure::new(1, e))?;
        let summary = loaded.summary().map_err(|e| Failure::new(1, e))?;
        rows.push((loaded.name(), loaded.config, summary));
    }
    if json {
        let out: Vec<_> = rows
            .iter()
            .map(|(name, cfg, s)| serde_json::json!({"run": name, "config": cfg, "summary": s}))
            .collect();
        let text = serde_json::to_string_pretty(&out).map_err(|e| Failure::new(1, e))?;
        println!("{text}");
        return Ok(());
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(3).max(3);
    println!(
        "{:width$}  {:10} {:>2} {:>3} {:>5} {:>9} {:>9} {:>9} {:>9} {:>7}",
        "run",
        "algo",
        "m",
        "n",
        "steps",
        "final_acc",
        "best_acc",
        "density",
        "valid_adv",
        "dropped"
    );
    for (name, cfg, s) in &rows {
        let algo = match cfg.algo {
            Algo::Grpo => "grpo",
            Algo::ShareGrpo => "share-grpo",
        };
        println!(
            "{name:width$}  {algo:10} {:>2} {:>3} {:>5} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>7}",
            cfg.m,
            cfg.n,
            s.steps,
            s.final_eval_accuracy,
            s.best_eval_accuracy,
            s.mean_reward_density,
            s.mean_valid_adv_ratio_pooled,
            s.total_dropped_seeds
        );
    }
    Ok(())
}

fn cmd_list_transforms(grid_dim: usize) -> Result<(), Failure> {
    let registry =
        TransformRegistry::standard(grid_dim).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    for spec in registry.specs() {
        println!("{spec}");
    }
    Ok(())
}

fn cmd_verify(seed: u64, cases: usize) -> Result<(), Failure> {
    let report = verify::run_all(seed, cases);
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {:28} {}", c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure::new(
            EXIT_VERIFY,
            anyhow!("{failed} check(s) failed"),
        ))
    }
}

fn cmd_experiment(spec_path: &Path, out: &Path, opts: TrainOptions) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))
        .map_err(config_failure)?;
    let spec: ExperimentSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", spec_path.display()))
        .map_err(config_failure)?;
    spec.check_names().map_err(run_failure)?;
    let configs = spec
        .runs
        .iter()
        .map(|r| {
            spec.base
                .clone()
                .overlay(r.config.clone())
                .resolve()
                .with_context(|| format!("run `{}`", r.name))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(config_failure)?;
    for r in &spec.runs {
        let dir = out.join(&r.name);
        if run::is_run_dir(&dir) {
            return Err(run_failure(RunError::Exists(dir)));
        }
    }
    for (r, cfg) in spec.runs.iter().zip(&configs) {
        train_into(&out.join(&r.name), cfg, opts)?;
    }
    Ok(())
}

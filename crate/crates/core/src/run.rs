//! Run directories: everything needed to inspect or reproduce a training run.
//!
//! ```text
//! <dir>/config.json           resolved TrainConfig
//! <dir>/metrics.csv           one StepMetrics row per step
//! <dir>/checkpoint.bin        final weights, little-endian f64
//! <dir>/checkpoint.meta.json  weight tensor shape
//! <dir>/manifest.json         timing, digest, status
//! <dir>/diagnostic.json       only when the run diverged
//! ```

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError, RunSummary, StepMetrics};
use crate::policy::{PolicyError, PolicyParams};
use crate::trainer::{Diverged, RunArtifacts, TrainConfig, TrainConfigPatch};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_META_FILE: &str = "checkpoint.meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("run directory {0} already holds a run")]
    Exists(PathBuf),
    #[error("duplicate run name `{0}`")]
    DuplicateName(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| RunError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| RunError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub wall_seconds: f64,
    pub steps_completed: usize,
    pub initial_eval_accuracy: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    /// Hex digest of the final weights.
    pub params_digest: Option<String>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub error: String,
    pub steps_completed: usize,
    pub last_metrics: Option<StepMetrics>,
}

/// True if `dir` already contains a run.
pub fn is_run_dir(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).exists() || dir.join(MANIFEST_FILE).exists()
}

fn prepare(dir: &Path) -> Result<(), RunError> {
    if is_run_dir(dir) {
        return Err(RunError::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_completed(
    dir: &Path,
    cfg: &TrainConfig,
    run: &RunArtifacts,
    started_at: DateTime<Utc>,
) -> Result<RunManifest, RunError> {
    prepare(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    metrics::write_csv_file(dir.join(METRICS_FILE), &run.metrics)?;
    run.final_params
        .save_checkpoint(dir.join(CHECKPOINT_FILE), dir.join(CHECKPOINT_META_FILE))?;
    let finished_at = Utc::now();
    let manifest = RunManifest {
        status: RunStatus::Completed,
        started_at,
        finished_at,
        wall_seconds: (finished_at - started_at).num_milliseconds() as f64 / 1000.0,
        steps_completed: run.metrics.len(),
        initial_eval_accuracy: Some(run.initial_eval_accuracy),
        final_eval_accuracy: run.metrics.last().map(|m| m.eval_accuracy),
        params_digest: Some(format!("{:016x}", run.final_params.digest())),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_diverged(
    dir: &Path,
    cfg: &TrainConfig,
    failure: &Diverged,
    started_at: DateTime<Utc>,
) -> Result<(), RunError> {
    prepare(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    metrics::write_csv_file(dir.join(METRICS_FILE), &failure.metrics)?;
    write_json(
        &dir.join(DIAGNOSTIC_FILE),
        &Diagnostic {
            error: failure.error.to_string(),
            steps_completed: failure.metrics.len(),
            last_metrics: failure.metrics.last().cloned(),
        },
    )?;
    let finished_at = Utc::now();
    write_json(
        &dir.join(MANIFEST_FILE),
        &RunManifest {
            status: RunStatus::Diverged,
            started_at,
            finished_at,
            wall_seconds: (finished_at - started_at).num_milliseconds() as f64 / 1000.0,
            steps_completed: failure.metrics.len(),
            initial_eval_accuracy: None,
            final_eval_accuracy: failure.metrics.last().map(|m| m.eval_accuracy),
            params_digest: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )
}

/// A run directory read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: TrainConfig,
    pub metrics: Vec<StepMetrics>,
}

impl LoadedRun {
    pub fn name(&self) -> String {
        self.dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dir.display().to_string())
    }

    pub fn summary(&self) -> Result<RunSummary, RunError> {
        Ok(metrics::summarize(&self.metrics)?)
    }

    pub fn checkpoint(&self) -> Result<PolicyParams, RunError> {
        Ok(PolicyParams::load_checkpoint(
            self.dir.join(CHECKPOINT_FILE),
            self.dir.join(CHECKPOINT_META_FILE),
        )?)
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, RunError> {
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config: read_json(&dir.join(CONFIG_FILE))?,
        metrics: metrics::read_csv_file(dir.join(METRICS_FILE))?,
    })
}

/// A named list of configs to run one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Applied under every run's own settings.
    #[serde(default)]
    pub base: TrainConfigPatch,
    pub runs: Vec<ExperimentRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRun {
    pub name: String,
    #[serde(default)]
    pub config: TrainConfigPatch,
}

impl ExperimentSpec {
    pub fn check_names(&self) -> Result<(), RunError> {
        let mut seen = HashSet::new();
        for run in &self.runs {
            if !seen.insert(run.name.as_str()) {
                return Err(RunError::DuplicateName(run.name.clone()));
            }
        }
        Ok(())
    }
}

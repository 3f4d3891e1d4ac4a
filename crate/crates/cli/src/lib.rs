//! Experiment runner: configuration, run directories and the experiments
//! behind each subcommand.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use config::{ExperimentKind, RunConfig};
use output::{RunDir, Summary, CONFIG_FILE};

/// Environment variable naming the parent directory for run outputs.
pub const RUN_DIR_ENV: &str = "RUN_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl From<nmsleak_core::Error> for CliError {
    fn from(e: nmsleak_core::Error) -> Self {
        match e {
            nmsleak_core::Error::InvalidParameter { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    /// Process exit code: 2 for configuration errors, 3 for runtime
    /// failures. Failed acceptance checks exit with 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub const EXIT_CHECKS_FAILED: i32 = 4;

/// Default output directory: `$RUN_DIR/<kind>-seed<seed>`, or `runs/...`.
pub fn default_out_dir(cfg: &RunConfig) -> PathBuf {
    let parent = std::env::var_os(RUN_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    parent.join(format!("{}-seed{}", cfg.kind, cfg.seed))
}

/// Validates `cfg`, runs the experiment and persists everything under
/// `out`. A failure after the directory exists leaves a `FAILED` marker.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Summary, CliError> {
    cfg.validate()?;
    if cfg.kind == ExperimentKind::Serve && !cfg.serve.parity {
        return Err(CliError::Config(
            "serve: the long-running server has no run directory; set serve.parity for the loopback campaign".into(),
        ));
    }
    let snapshot = cfg.to_toml()?;
    let dir = RunDir::create(out)?;
    let result = dir
        .write(CONFIG_FILE, snapshot.as_bytes())
        .and_then(|_| experiments::run_experiment(cfg))
        .and_then(|outcome| dir.persist(cfg.kind.name(), cfg.seed, &outcome));
    if let Err(e) = &result {
        dir.mark_failed(&e.to_string());
    }
    result
}

//! Experiment orchestration: configs, metrics files, multi-arm comparisons,
//! summaries and the empirical bound checks.

mod experiment;
mod metrics;
mod report;
mod summary;
pub mod verify;

use std::path::Path;

use thiserror::Error;

use crate::algorithms::{AlgoError, RunConfig};

pub use experiment::{compare, run_single, sweep, ArmOutcome, ArmSpec, ExperimentSpec, SweepSpec};
pub use metrics::{read_metrics, write_metrics, METRICS_HEADER};
pub use report::{bounds_report, BoundsReport};
pub use summary::{summarize, ArmSummary, Ratios, Summary, Threshold};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics line {line}: {msg}")]
    Metrics { line: usize, msg: String },
    #[error(transparent)]
    Algo(AlgoError),
    #[error(transparent)]
    Collective(#[from] crate::collectives::CollectiveError),
}

impl From<AlgoError> for RunnerError {
    fn from(e: AlgoError) -> Self {
        match e {
            AlgoError::Config(msg) => RunnerError::Config(msg),
            AlgoError::Topology(t) => RunnerError::Config(t.to_string()),
            other => RunnerError::Algo(other),
        }
    }
}

impl RunnerError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunnerError::Config(_) | RunnerError::Json(_))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, RunnerError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

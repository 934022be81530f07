//! Experiment orchestration for the sparse random hierarchy model.
//!
//! * [`config`]: TOML experiment configurations and the desk presets.
//! * [`generate`]: serialized rule sets and datasets.
//! * [`sweep`]: resumable, append-only sweeps and per-combination tables.
//! * [`manifest`]: run manifests sufficient to replay a sweep.
//! * [`fit`]: log-space fits of the sample-complexity laws.
//! * [`scatter`]: error versus output-sensitivity triples and Spearman's rho.
//! * [`plot`]: byte-deterministic SVG figures.

pub mod config;
pub mod fit;
pub mod generate;
pub mod manifest;
pub mod plot;
pub mod scatter;
pub mod sweep;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column {column} in {file}")]
    MissingColumn { column: String, file: String },
    #[error("insufficient points: need {needed}, got {got} ({what})")]
    InsufficientPoints { needed: usize, got: usize, what: String },
    #[error(transparent)]
    Grammar(#[from] srhm::grammar::GrammarError),
    #[error(transparent)]
    Train(#[from] srhm::train::TrainError),
    #[error(transparent)]
    Probe(#[from] srhm::probes::ProbeError),
    #[error(transparent)]
    Data(#[from] srhm::io::IoError),
    #[error("{failed} of {total} cells failed")]
    PartialFailure { failed: usize, total: usize },
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for partial
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::PartialFailure { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Worker count from `SRHM_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("SRHM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

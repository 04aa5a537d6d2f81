//! Experiment configuration, Monte Carlo orchestration and result files.

mod config;
mod experiment;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    ChainKind, ChainSpec, EngineSelection, ExperimentConfig, Generator, GraphSpec, ProblemKind,
    ProblemSpec, Setup,
    validate_config,
};
pub use experiment::{
    aggregate, constants_report, emit, run_experiment, trial_seed, Aggregate, ConstantsReport,
    EngineResult, ResultBundle, Trajectory, PI_TOLERANCE, REPORTED_PI_MAX, REPORTED_PI_MIN,
    THREADS_ENV, TRIAL_SEED_STEP,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("worker pool: {0}")]
    ThreadPool(String),
}

impl CliError {
    pub(crate) fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Schema { .. } | CliError::Invalid { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Write { .. } | CliError::ThreadPool(_) => 1,
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numerical(e.to_string())
            }
        }
    )*};
}

numerical_from!(
    crate::admm::AdmmError,
    crate::analysis::AnalysisError,
    crate::markov::MarkovError,
    crate::objective::ObjectiveError
);

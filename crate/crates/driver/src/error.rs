use std::path::PathBuf;

use gdpo_core::corpus::CorpusError;
use gdpo_core::evalmetrics::EvalError;
use gdpo_core::numerics::NumericError;
use gdpo_core::objectives::ObjectiveError;
use gdpo_core::oracle::OracleError;
use gdpo_core::policy::PolicyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite {what} at step {step}")]
    Diverged { what: &'static str, step: usize },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

pub type Result<T> = std::result::Result<T, DriverError>;

impl DriverError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DriverError {
        let path = path.into();
        move |source| DriverError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> DriverError {
        DriverError::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// 2 for bad input, 3 for numeric failure, 4 for a failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Numeric(_) | DriverError::Diverged { .. } | DriverError::GradCheck(_) => 3,
            DriverError::Objective(ObjectiveError::NonFinite { .. }) => 3,
            DriverError::Oracle(OracleError::NotConverged { .. }) => 3,
            DriverError::Acceptance(_) => 4,
            _ => 2,
        }
    }
}

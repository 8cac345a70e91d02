//! Discrete-event simulation of communication-scheduled distributed DNN
//! training, plus the auto-configuration stack built on top of it: a
//! meta-network speed predictor, grid-search and Bayesian-optimization
//! baselines, and an online reconfiguration controller.

pub mod controller;
pub mod harness;
pub mod metanet;
pub mod oracle;
pub mod simcore;
pub mod tuners;
pub mod workload;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("evaluator failed at {config}: {message}")]
    Evaluator { config: String, message: String },
    #[error("{context}: {source}")]
    Scenario {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_scenario(self, context: impl Into<String>) -> Error {
        Error::Scenario {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

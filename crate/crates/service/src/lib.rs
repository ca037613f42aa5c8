//! A live bias-bounty program served over HTTP.
//!
//! Hunters read the current model and the public train/test splits, submit
//! `(group, model)` predictor documents, and learn only a verdict bit per
//! submission. The checker holdout never leaves the validator.

pub mod config;
pub mod http;
pub mod ledger;
pub mod program;

use fairbounty_core::{CertifyError, DatasetError, EngineError, PredictorError};
use thiserror::Error;

pub use config::{DataSource, ServiceConfig};
pub use http::{router, serve, AppState, SUBMITTER_HEADER};
pub use ledger::{Ledger, LedgerRecord, SubmissionRecord};
pub use program::{load_data, Program, ProgramData, SubmitError, SubmitReceipt};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("ledger: {0}")]
    Ledger(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

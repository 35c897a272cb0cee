//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the search engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An API contract was violated (non-scalar loss, duplicate round, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data (negative adjacency weight, too few steps, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A file could not be parsed; carries the 1-based line number when known.
    #[error("parse error{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, detail: String },

    /// An LLM response did not match the required format. Feeds the retry loop.
    #[error("response parse error: {0}")]
    ResponseParse(String),

    /// The remote LLM backend failed after exhausting retries.
    #[error("backend error: {0}")]
    Backend(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Operation requires a non-empty memory bank.
    #[error("memory bank is empty")]
    EmptyBank,

    /// A tensor health check found NaN or infinite values.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for backend failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Parse { .. } => 2,
            Error::Backend(_) => 3,
            _ => 1,
        }
    }
}

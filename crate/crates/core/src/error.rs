use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {position} out of range for sequence length {seq_len}")]
    Range { position: usize, seq_len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate attention row {row}: no permitted key")]
    DegenerateRow { row: usize },

    #[error("non-finite activation at stage `{stage}`")]
    NumericOverflow { stage: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no supervised pixel: {0}")]
    EmptySupervision(String),

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("probe training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("no probe available for stage `{0}`")]
    MissingProbe(String),

    #[error("empty aggregate: all {skipped} image(s) were skipped")]
    EmptyAggregate { skipped: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::MissingProbe(_) => 2,
            Error::NumericOverflow { .. }
            | Error::TrainingDiverged { .. }
            | Error::DegenerateRow { .. } => 3,
            Error::EmptyEvaluation(_) | Error::EmptySupervision(_) | Error::EmptyAggregate { .. } => 4,
            Error::Format(_) | Error::Shape(_) | Error::Range { .. } => 5,
            Error::Io { .. } => 6,
        }
    }
}

use thiserror::Error;

use crate::autodiff::GraphError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unsupported model: {0}")]
    UnsupportedModel(&'static str),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("gradient has zero norm")]
    ZeroNorm,
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("not enough rows: need {need}, have {have}")]
    InsufficientRows { need: usize, have: usize },
    #[error("power iteration did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("degenerate key vector (norm {0:e})")]
    DegenerateKey(f64),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than by a failed
    /// computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::SequenceTooLong { .. }
            | Error::UnknownToken(_)
            | Error::UnsupportedModel(_)
            | Error::Parse { .. }
            | Error::Json(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

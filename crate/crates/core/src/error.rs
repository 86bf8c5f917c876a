use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by every stage of the imputation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample stream")]
    EmptyStream,
    #[error("non-finite input")]
    NonFinite,
    #[error("grid mismatch")]
    GridMismatch,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate response")]
    DegenerateResponse,
    #[error("no observed responses")]
    NoObservedResponses,
    #[error("degenerate design")]
    DegenerateDesign,
    #[error("insufficient observed rows: need {need}, have {have}")]
    InsufficientRows { need: usize, have: usize },
    #[error("{solver} did not converge after {iterations} iterations")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        last_iterate: Vec<f64>,
    },
    #[error("monotone likelihood: step-halving exhausted")]
    MonotoneLikelihood,
    #[error("no events")]
    NoEvents,
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("partition '{0}' has no observed rows")]
    EmptyPartition(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorKind::Io,
            Error::DegenerateResponse
            | Error::DegenerateDesign
            | Error::NonConvergence { .. }
            | Error::MonotoneLikelihood
            | Error::NoEvents
            | Error::NoComparablePairs => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyStream => "empty_stream",
            Error::NonFinite => "non_finite",
            Error::GridMismatch => "grid_mismatch",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateResponse => "degenerate_response",
            Error::NoObservedResponses => "no_observed_responses",
            Error::DegenerateDesign => "degenerate_design",
            Error::InsufficientRows { .. } => "insufficient_rows",
            Error::NonConvergence { .. } => "non_convergence",
            Error::MonotoneLikelihood => "monotone_likelihood",
            Error::NoEvents => "no_events",
            Error::NoComparablePairs => "no_comparable_pairs",
            Error::EmptyPartition(_) => "empty_partition",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Parse(_) => "parse",
            Error::Stage { source, .. } => source.code(),
        }
    }

    /// Wraps `self` with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

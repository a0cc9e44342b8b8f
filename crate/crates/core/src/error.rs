use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The explicit time loop produced a non-finite value.
    #[error("finite-difference instability at step {step}: non-finite value at node {node}")]
    Instability { step: usize, node: usize },

    #[error("radiation corrector did not converge at step {step} (residual {residual:e})")]
    CorrectorDiverged { step: usize, residual: f64 },

    #[error("no periodic steady state after {periods} periods (last residual {residual:e})")]
    NotSteady { periods: usize, residual: f64 },

    /// Non-finite network output or gradient; `location` names the layer or loss term.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("training aborted at epoch {epoch}: non-finite loss (last good checkpoint: {checkpoint})")]
    TrainingDiverged { epoch: usize, checkpoint: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    /// The least-squares design matrix is rank deficient.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A pipeline stage failed; `stage` names it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

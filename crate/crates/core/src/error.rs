use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScalpelError>;

/// Every failure the library can report.
///
/// Variants fall in two families: validation errors (bad inputs, violated
/// preconditions) and runtime failures (I/O, numerical non-convergence).
/// The CLI maps the former to exit code 1 and the latter to exit code 2.
#[derive(Debug, Error)]
pub enum ScalpelError {
    #[error("non-finite payload")]
    NonFinite,
    #[error("empty dimension")]
    EmptyDimension,
    #[error("not an activation file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("covariance not positive definite")]
    NotPositiveDefinite,
    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),
    #[error("sinkhorn did not converge: marginal residual {residual:.3e} after {iterations} iterations")]
    SinkhornNotConverged { residual: f64, iterations: usize },
    #[error("solver failed: {0}")]
    SolverFailed(String),
    #[error("point off all bridges")]
    OffAllBridges,
    #[error("terminal-time drift undefined")]
    TerminalDrift,
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("degenerate labels: both classes must be present")]
    DegenerateLabels,
    #[error("need ≥ 2 samples")]
    TooFewSamples,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("artifact hash mismatch for {path}")]
    HashMismatch { path: PathBuf },
    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed ({artifact}): {source}")]
    Stage {
        stage: &'static str,
        artifact: String,
        #[source]
        source: Box<ScalpelError>,
    },
}

impl ScalpelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScalpelError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            ScalpelError::Io { .. }
            | ScalpelError::SinkhornNotConverged { .. }
            | ScalpelError::SolverFailed(_)
            | ScalpelError::Json(_) => false,
            ScalpelError::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub(crate) fn stage(stage: &'static str, artifact: impl Into<String>) -> impl FnOnce(Self) -> Self {
        let artifact = artifact.into();
        move |source| ScalpelError::Stage {
            stage,
            artifact,
            source: Box::new(source),
        }
    }
}

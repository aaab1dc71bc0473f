use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("mesh invariant `{invariant}` violated at {entity} {index}: {detail}")]
    MeshInvariant {
        invariant: &'static str,
        entity: &'static str,
        index: usize,
        detail: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported element type {element_type} at line {line}")]
    UnsupportedElement { element_type: u32, line: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("schema error at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure { .. }
                | Error::NonFinite { .. }
                | Error::NonFiniteActivation { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}

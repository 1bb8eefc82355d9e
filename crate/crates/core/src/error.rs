use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible grids: {0}")]
    GeometryMismatch(String),

    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("length mismatch: header declares {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("non-finite energy at iteration {iter}")]
    NonFiniteEnergy { iter: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("deformation folds (min Jacobian {min_jacobian:.4})")]
    Folding { min_jacobian: f64 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {path} (produced by `{producer}`)")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MalformedHeader { .. } => "malformed_header",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonFiniteEnergy { .. } => "non_finite_energy",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Folding { .. } => "folding",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
        }
    }
}

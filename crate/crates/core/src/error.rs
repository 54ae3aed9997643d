use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the localization library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate projection: homogeneous scale {0:e} is too close to zero")]
    DegenerateProjection(f64),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("no pixel of view {0} hits scene geometry")]
    EmptyView(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("keypoint ({x:.1}, {y:.1}) is closer than {margin} px to the image border")]
    BorderViolation { x: f64, y: f64, margin: usize },
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cluster has {0} members, whitening needs at least 2")]
    ClusterTooSmall(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("forest needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("manifest {path}: {message}")]
    ManifestParse { path: PathBuf, message: String },
    #[error("manifest entry {index}: image {path} does not exist")]
    MissingImage { index: usize, path: PathBuf },
    #[error("manifest entry {index}: projection matrix has {count} numbers, expected 12")]
    MalformedMatrix { index: usize, count: usize },
    #[error("config {path}: field `{field}`: {message}")]
    Config {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("bad {format} file: {message}")]
    Format {
        format: &'static str,
        message: String,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("incomplete folds: {0:?}")]
    IncompleteFolds(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error stems from bad user input (config, CLI arguments,
    /// input files) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::ManifestParse { .. }
                | Error::MissingImage { .. }
                | Error::MalformedMatrix { .. }
                | Error::InvalidIntrinsics(_)
                | Error::InvalidScene(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The CLI maps these onto exit codes: [`Error::Usage`] is a usage error,
/// [`Error::Diverged`] signals filter divergence, everything else is a data
/// error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("steering angle {0} rad hits the tangent singularity")]
    SteeringSingularity(f64),

    #[error("class {class} out of range for a map with {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("map type mismatch: expected {expected}, found {found}")]
    MapTypeMismatch { expected: String, found: String },

    #[error("malformed tile: {0}")]
    BadTile(String),

    #[error("tile ({0}, {1}) is outside the active 3x3 window")]
    OutsideWindow(i32, i32),

    #[error("gauge freedom: component containing node {0} has no unary edge or fixed node")]
    Unanchored(usize),

    #[error("singular normal equations at node {node} (pivot {pivot:e})")]
    Singular { node: usize, pivot: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("unreachable waypoint {index} at ({x:.2}, {y:.2})")]
    Unreachable { index: usize, x: f64, y: f64 },

    #[error("filter diverged: {0}")]
    Diverged(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("usage: {0}")]
    Usage(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

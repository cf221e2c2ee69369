//! Crate-wide error type and its coarse classification for exit codes.

use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::camera::CameraError;
use crate::keypoints::KeypointError;
use crate::model_fitting::FitError;
use crate::semantic_map::MapError;
use crate::shape_prior::ShapeError;
use crate::state_estimation::EkfError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Keypoints(#[from] KeypointError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse category used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::Config
            }
            Error::Io { .. } => ErrorKind::Internal,
            Error::Json { .. } | Error::Keypoints(_) | Error::Map(_) | Error::Shape(_) => {
                ErrorKind::Data
            }
            Error::Analytics(AnalyticsError::InvalidTrajectory { .. }) => ErrorKind::Data,
            Error::Analytics(_) => ErrorKind::Config,
            Error::Camera(_) | Error::Fit(_) | Error::Ekf(_) => ErrorKind::Data,
        }
    }
}

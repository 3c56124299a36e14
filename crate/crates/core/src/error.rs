use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("viewing ray does not intersect the ground plane")]
    NoIntersection,

    #[error("torso ray is degenerate with respect to the ground normal")]
    DegenerateRay,

    #[error("image direction toward the ground is undefined at this pixel")]
    DirectionUndefined,

    #[error("invalid ground plane: {0}")]
    InvalidPlane(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("cropping layout infeasible: {0}")]
    LayoutInfeasible(String),

    #[error("invalid observation: {0}")]
    ObservationInvalid(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("scene infeasible: {0}")]
    SceneInfeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
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

    #[error("malformed file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for this error class. Stage wrappers report the code
    /// of the underlying cause.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Parse { .. } => 4,
            Error::BehindCamera { .. }
            | Error::NoIntersection
            | Error::DegenerateRay
            | Error::DirectionUndefined
            | Error::InvalidPlane(_)
            | Error::InvalidCamera(_) => 10,
            Error::LayoutInfeasible(_) => 11,
            Error::ObservationInvalid(_) | Error::InsufficientData(_) => 12,
            Error::Undefined(_) | Error::DegenerateAlignment(_) => 13,
            Error::SceneInfeasible(_) => 14,
        }
    }
}

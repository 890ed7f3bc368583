use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-manifold vertex {vertex}: incident faces form more than one fan")]
    NonManifold { vertex: usize },

    #[error("inconsistent winding on edge ({0}, {1})")]
    InconsistentWinding(usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("decimation stalled at {reached} vertices (target {target}): {blocked} candidate collapses blocked")]
    Decimation {
        target: usize,
        reached: usize,
        blocked: usize,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("objective diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        /// Last parameter state whose objective was finite.
        last_finite: Box<crate::hand::HandParams>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

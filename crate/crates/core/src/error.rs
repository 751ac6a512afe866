use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum TcsError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("no path from node {origin} to node {destination}")]
    Unreachable { origin: usize, destination: usize },

    #[error("invalid path for traveler {traveler} trip {trip}: {reason}")]
    InvalidPath {
        traveler: u32,
        trip: usize,
        reason: String,
    },

    #[error("no travel time for segment {segment} at bin {bin}")]
    MissingTravelTime { segment: usize, bin: usize },

    #[error("empty choice set")]
    EmptyChoiceSet,

    #[error("cannot sell from an empty account (traveler {0})")]
    EmptySale(u32),

    #[error("no trip records")]
    NoRecords,

    #[error("population mismatch: {0}")]
    PopulationMismatch(String),

    #[error("covariance matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TcsError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        TcsError::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TcsError> = std::result::Result<T, E>;

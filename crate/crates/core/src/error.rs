use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("{path}: line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("centerline loop is open: endpoint gap {gap:.2} m exceeds {limit:.2} m")]
    OpenLoop { gap: f64, limit: f64 },

    #[error("too few samples: {found} (need at least {needed})")]
    TooFewPoints { found: usize, needed: usize },

    #[error("lane offset {offset} m leaves the track (available {available} m)")]
    OffsetOutOfBounds { offset: f64, available: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("occupancy stamp {new} s is not after previous stamp {prev} s")]
    StaleStamp { prev: f64, new: f64 },

    #[error("linearization is singular at steering {0} rad")]
    SingularSteering(f64),

    #[error("simulation diverged at t = {time} s: {what}")]
    Diverged { time: f64, what: String },

    #[error("trace: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

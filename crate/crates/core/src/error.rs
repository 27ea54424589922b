//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A `GpuSpec` invariant was violated. The message names the first
    /// violated invariant.
    #[error("invalid gpu spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },

    #[error("invalid kernel profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },

    #[error("unknown pipeline `{0}` (not declared by the gpu spec)")]
    UnknownPipeline(String),

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),

    #[error("metrics csv: {0}")]
    Csv(String),

    #[error("metrics csv row {row}: {reason}")]
    CsvRow { row: usize, reason: String },

    #[error("required metric `{0}` is missing")]
    MissingMetric(String),

    #[error("metric `{name}` has conflicting values {a} and {b}")]
    ConflictingMetric { name: String, a: f64, b: f64 },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("occupancy: {0}")]
    Occupancy(String),

    #[error("plan: {0}")]
    Plan(String),

    #[error("unknown gpu `{0}` (not a built-in, a file, or present in GCE_SPEC_DIR)")]
    UnknownGpu(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than runtime failures.
    /// The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

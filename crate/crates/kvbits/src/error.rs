//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by sensitivity ingestion, calibration, allocation and
/// simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimensions must be positive, got {layers} layers x {heads} heads")]
    NonPositiveDims { layers: usize, heads: usize },

    #[error(
        "grid shape mismatch for {grid}: declared {layers}x{heads}, row {row} has {found} entries"
    )]
    GridShape {
        grid: &'static str,
        layers: usize,
        heads: usize,
        row: usize,
        found: usize,
    },

    #[error("invalid weight {value} at (layer {layer}, head {head}, side {side}): must be finite and > 0")]
    InvalidWeight {
        layer: usize,
        head: usize,
        side: char,
        value: f64,
    },

    #[error("invalid sigma {0}: must be finite and >= 0")]
    InvalidSigma(f64),

    #[error("bit-width {bits} out of range [{min}, {max}]")]
    BitsOutOfRange { bits: u32, min: u32, max: u32 },

    #[error("vector length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("invalid distortion model: {0}")]
    InvalidModel(String),

    #[error("calibration failure: log-domain slope {slope:.6} yields beta {beta:.6} <= 1 (distortion must decay with bits)")]
    CalibrationFailure { slope: f64, beta: f64 },

    #[error("need at least 2 points with distinct bit values to fit, got {0}")]
    NotEnoughPoints(usize),

    #[error("non-positive MSE {mse} at bits {bits}: all measured MSE must be > 0")]
    NonPositiveMse { bits: f64, mse: f64 },

    #[error("infeasible budget {budget} for {n} components with bounds [{b_min}, {b_max}]: require {lo} <= budget <= {hi}")]
    InfeasibleBudget {
        budget: i64,
        n: usize,
        b_min: u32,
        b_max: u32,
        lo: i64,
        hi: i64,
    },

    #[error("invalid bounds: b_min {b_min} must satisfy 1 <= b_min <= b_max <= 8, got b_max {b_max}")]
    InvalidBounds { b_min: u32, b_max: u32 },

    #[error("instance too large for exhaustive search: {0}")]
    TooLargeForExhaustion(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown quantizer label '{0}'; valid labels: {1}")]
    UnknownQuantizer(String, String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {message}", path.display())]
    MalformedFile { path: PathBuf, message: String },

    #[error("schema violation in {}: {message}", path.display())]
    SchemaViolation { path: PathBuf, message: String },

    #[error("invariant violated by {entity}: {message}")]
    InvariantViolation { entity: String, message: String },

    #[error("negative pressure {0} Pa")]
    NegativePressure(f64),

    #[error("efficiency factor must be positive, got {0}")]
    NonpositiveFactor(f64),

    #[error("scale mismatch: scales use a = {scales} m/s but the gas has a = {gas} m/s")]
    ScaleMismatch { scales: f64, gas: f64 },

    #[error("pipe {pipe} cannot be refined with segment length {segment_length}")]
    InfeasibleRefinement { pipe: String, segment_length: f64 },

    #[error("no compression ratio for compressor {compressor} at time index {index}")]
    MissingRatio { compressor: String, index: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error(
        "Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("singular Jacobian: {cause}")]
    SingularJacobian { cause: String },

    #[error("infeasible bounds: {0}")]
    InfeasibleBoxes(String),

    #[error("singular KKT system; increase regularization or the flux smoothing parameter")]
    SingularKkt,

    #[error("problem appears infeasible: {0}")]
    InfeasibleDetected(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn invariant(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvariantViolation {
            entity: entity.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than solver failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularJacobian { .. }
                | Error::SingularKkt
                | Error::InfeasibleDetected(_)
        )
    }
}

use thiserror::Error;

/// Errors raised by the estimator, the diagnostics and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("empty risk set at time {time}")]
    EmptyRiskSet { time: f64 },
    #[error("event at time {time} has no positive hazard jump")]
    InvalidHazard { time: f64 },
    #[error("mixture density underflowed for subject {subject}")]
    DensityUnderflow { subject: usize },
    #[error("optimizer failed: {reason}")]
    OptimizerFailure { reason: String, best: Vec<f64> },
    #[error("singular information matrix (condition number {condition:e}); null direction {direction:?}")]
    SingularInformation { condition: f64, direction: Vec<f64> },
    #[error("finite-difference column for coordinate {coordinate} is not finite")]
    NonFiniteDifference { coordinate: usize },
    #[error("total hazard mass is zero; contraction bound undefined")]
    ZeroHazardMass,
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("{file}, row {row}, column `{column}`: {message}")]
    Schema { file: String, row: usize, column: String, message: String },
    #[error("subject ids present in the ordinal file but missing from the survival file: {}", .0.join(", "))]
    IdMismatch(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidData(_)
                | Error::InvalidDesign(_)
                | Error::InvalidParams(_)
                | Error::Schema { .. }
                | Error::IdMismatch(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::IndexOutOfRange { .. }
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid model specification `{label}`: {reason}")]
    ModelSpec { label: String, reason: String },
    #[error("missing column `{0}` in data header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Unparseable {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown category `{value}` for variable `{column}`")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: wage must be positive, got {value}")]
    NonPositiveWage { row: usize, value: f64 },
    #[error("row {row}: sampling weight must be positive, got {value}")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no {0} records in the dataset")]
    EmptyGroup(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown area `{0}`")]
    UnknownArea(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design matrix is rank deficient; offending columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("need more observations ({n}) than fixed effects ({p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("covariance block for area `{0}` is singular")]
    SingularCovariance(String),
    #[error("{failed} of {attempted} {what} failed")]
    TooManyFailures {
        what: String,
        failed: usize,
        attempted: usize,
    },
    #[error("data too sparse: {0}")]
    SparseData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration errors:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
}

/// Broad failure class, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::ModelSpec { .. }
            | Error::Schema(_)
            | Error::UnknownVariable(_)
            | Error::InvalidArgument(_)
            | Error::Json(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::MissingColumn(_)
            | Error::Unparseable { .. }
            | Error::UnknownCategory { .. }
            | Error::NonPositiveWage { .. }
            | Error::NonPositiveWeight { .. }
            | Error::MissingValue { .. }
            | Error::Csv(_)
            | Error::EmptyGroup(_)
            | Error::UnknownArea(_)
            | Error::SparseData(_) => ErrorClass::Data,
            Error::DimensionMismatch(_)
            | Error::RankDeficient { .. }
            | Error::TooFewObservations { .. }
            | Error::SingularCovariance(_)
            | Error::TooManyFailures { .. } => ErrorClass::Numerical,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("duplicate unit id {0:?}")]
    DuplicateUnit(String),

    #[error("edge references unknown unit id {0:?}")]
    UnknownUnit(String),

    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("need at least 3 units, got {0}")]
    TooFewUnits(usize),

    #[error("non-finite input in {0}")]
    NonFinite(String),

    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("pooled within-chain covariance is singular; degenerate coordinate {index} ({name})")]
    SingularCovariance { index: usize, name: String },

    #[error("not enough draws: {0}")]
    InsufficientDraws(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("simulation: {0}")]
    Simulation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::MissingColumn(_) => "missing_column",
            Error::DuplicateUnit(_) => "duplicate_unit",
            Error::UnknownUnit(_) => "unknown_unit",
            Error::InvalidValue { .. } => "invalid_value",
            Error::TooFewUnits(_) => "too_few_units",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidAdjacency(_) => "invalid_adjacency",
            Error::Constraint(_) => "constraint",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::SingularCovariance { .. } => "singular_covariance",
            Error::InsufficientDraws(_) => "insufficient_draws",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Simulation(_) => "simulation",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

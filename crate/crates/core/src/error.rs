use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("exogenous column {column} has zero norm")]
    ZeroExogenousColumn { column: usize },

    #[error("non-finite entry in {matrix} at row {row}, column {column}")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        column: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("kernel matrix is not PSD: min eigenvalue {min_eig:e} vs max {max_eig:e}")]
    KernelNotPsd { min_eig: f64, max_eig: f64 },

    #[error("numerically singular {dim}x{dim} system (try increasing the ridge)")]
    NumericalSingularity { dim: usize },

    #[error("solver `{solver}` diverged at iteration {iteration}")]
    Diverged { solver: &'static str, iteration: usize },

    #[error("polynomial features overflowed (order {order}); standardize the inputs")]
    FeatureOverflow { order: usize },

    #[error("truth adjacency is degenerate: {0}")]
    DegenerateTruth(String),

    #[error("graph too large: {nodes} nodes exceeds the limit of {limit}")]
    SizeOverflow { nodes: usize, limit: usize },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 solver failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::KernelNotPsd { .. } | Error::NumericalSingularity { .. } | Error::Diverged { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }

    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ZeroExogenousColumn { .. } => "zero_exogenous_column",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::KernelNotPsd { .. } => "kernel_not_psd",
            Error::NumericalSingularity { .. } => "numerical_singularity",
            Error::Diverged { .. } => "solver_diverged",
            Error::FeatureOverflow { .. } => "feature_overflow",
            Error::DegenerateTruth(_) => "degenerate_truth",
            Error::SizeOverflow { .. } => "size_overflow",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

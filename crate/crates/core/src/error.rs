use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("non-numeric cell for subject {id}, column {column}: {value:?}")]
    NonNumeric {
        id: String,
        column: String,
        value: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("subject {0} has no covariate row")]
    MissingCovariates(String),
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
    #[error("covariate vectors must start with an intercept of 1 (subject {0})")]
    MissingIntercept(String),
    #[error("column {column} of subject {id} has zero variance")]
    ZeroVariance { id: String, column: usize },
    #[error("operation requires raw observations but subject {0} only has a covariance")]
    RawDataRequired(String),
    #[error("pooled covariance is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    SingularPooled { min_eigenvalue: f64 },
    #[error("non-finite value in {0}")]
    NumericOverflow(&'static str),
    #[error("projected variance of subject {0} is not positive")]
    ZeroProjectedVariance(usize),
    #[error("every cluster has zero weight for subject {0}")]
    DegenerateResponsibility(usize),
    #[error("gating regression diverged")]
    GatingDiverged,
    #[error("cluster {0} lost all of its weight")]
    EmptyCluster(usize),
    #[error("all {} restarts failed: {}", .0.len(), .0.join("; "))]
    AllRestartsFailed(Vec<String>),
    #[error("no orthogonal complement left to search (r = {r}, p = {p})")]
    NoComplementLeft { r: usize, p: usize },
    #[error("projection vectors are linearly dependent")]
    DegenerateProjections,
    #[error("projected covariance of subject {0} is numerically singular")]
    DfDSingular(usize),
    #[error("only {successes} of {requested} bootstrap replicates succeeded")]
    BootstrapUnstable { successes: usize, requested: usize },
    #[error("{0} clusters exceed the exhaustive permutation limit")]
    PermutationLimit(usize),
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero vector supplied")]
    ZeroVector,
    #[error("quadratic form is not positive")]
    NonPositiveQuadForm,
    #[error("covariance has a non-positive diagonal entry at {0}")]
    ZeroDiagonal(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Variant name, stable for scripts that inspect error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
            Error::NonNumeric { .. } => "NonNumeric",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::MissingCovariates(..) => "MissingCovariates",
            Error::DuplicateId(..) => "DuplicateId",
            Error::MissingIntercept(..) => "MissingIntercept",
            Error::ZeroVariance { .. } => "ZeroVariance",
            Error::RawDataRequired(..) => "RawDataRequired",
            Error::SingularPooled { .. } => "SingularPooled",
            Error::NumericOverflow(..) => "NumericOverflow",
            Error::ZeroProjectedVariance(..) => "ZeroProjectedVariance",
            Error::DegenerateResponsibility(..) => "DegenerateResponsibility",
            Error::GatingDiverged => "GatingDiverged",
            Error::EmptyCluster(..) => "EmptyCluster",
            Error::AllRestartsFailed(..) => "AllRestartsFailed",
            Error::NoComplementLeft { .. } => "NoComplementLeft",
            Error::DegenerateProjections => "DegenerateProjections",
            Error::DfDSingular(..) => "DfDSingular",
            Error::BootstrapUnstable { .. } => "BootstrapUnstable",
            Error::PermutationLimit(..) => "PermutationLimit",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::ZeroVector => "ZeroVector",
            Error::NonPositiveQuadForm => "NonPositiveQuadForm",
            Error::ZeroDiagonal(..) => "ZeroDiagonal",
            Error::InvalidConfig(..) => "InvalidConfig",
        }
    }
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

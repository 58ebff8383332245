use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must have positive dimensions, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular")]
    Singular,

    #[error("system matrix is not diagonalizable (condition {condition:.3e}, residual {residual:.3e})")]
    NotDiagonalizable { condition: f64, residual: f64 },

    #[error("variance has imaginary residue {imag:.3e} (real part {real:.6e})")]
    ImaginaryResidue { real: f64, imag: f64 },

    #[error("noise covariance is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPositiveSemidefinite { eigenvalue: f64 },

    #[error("noise covariance is not symmetric")]
    NotSymmetric,

    #[error("invalid link model: {0}")]
    InvalidLink(String),

    #[error("invalid system model: {0}")]
    InvalidModel(String),

    #[error("age must be at least 1, got {0}")]
    InvalidAge(u32),

    #[error("estimator needs {needed} past controls but memory holds {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("age {age} exceeds the control history depth {depth}")]
    HistoryOverflow { age: u32, depth: usize },

    #[error("invalid scenario field `{field}`: {message}")]
    InvalidScenario { field: String, message: String },

    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no counted steps to estimate a rate from")]
    ZeroSteps,

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("{passed} of {total} comparison cells inside the confidence interval, below the required fraction {required}")]
    AcceptanceFailed {
        passed: usize,
        total: usize,
        required: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Singular
            | Error::NotDiagonalizable { .. }
            | Error::ImaginaryResidue { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::NotSymmetric
            | Error::InsufficientHistory { .. }
            | Error::HistoryOverflow { .. } => 2,
            Error::AcceptanceFailed { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn scenario(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidScenario {
            field: field.into(),
            message: message.into(),
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (offending eigenvalue {0:.6e})")]
    NotPositiveDefinite(f64),
    #[error("singular predictor submatrix")]
    SingularSubmatrix,
    #[error("degenerate target: residual variance {0:.3e} after controls")]
    DegenerateTarget(f64),
    #[error("degenerate index variance")]
    DegenerateIndex,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("enumeration size {size} exceeds cap {cap}; use Monte Carlo sampling instead")]
    Overflow { size: u128, cap: u128 },
    #[error("internal consistency failure: {0}")]
    Internal(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("parse error at data row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code category: 2 config, 3 numeric, 4 resource cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::MissingColumn(_)
            | Error::Parse { .. }
            | Error::InsufficientGrid(_)
            | Error::Io(_)
            | Error::Csv(_) => 2,
            Error::Overflow { .. } => 4,
            _ => 3,
        }
    }
}

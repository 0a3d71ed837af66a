use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("cannot parse `{value}` as a finite number at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("validation failed at row {row}: {constraint}")]
    Validation { row: usize, constraint: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("design matrix is singular or rank deficient")]
    SingularDesign,

    #[error("information matrix is singular: {0}")]
    SingularInformation(String),

    #[error("null model fit did not converge: {0}")]
    NonConvergence(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("every grid point was skipped; the effective grid is empty")]
    DegenerateGrid,

    #[error("{failed} of {total} bootstrap refits failed to converge (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the input data or configuration rather than
    /// by a numerical breakdown.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Parse { .. }
                | Error::InsufficientData { .. }
                | Error::Validation { .. }
                | Error::DimensionMismatch(_)
                | Error::InvalidParameter(_)
                | Error::Grid(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{file}: row {row}: {msg}")]
    Parse { file: String, row: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver did not reach an optimal point: {0}")]
    NotOptimal(String),
    #[error("iteration limit reached: {0}")]
    MaxIter(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no interior center: {0}")]
    InfeasibleCenter(String),
    #[error("no bounded boundary point along sampled directions: {0}")]
    UnboundedDirection(String),
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Singular(_) => "singular",
            Error::NotOptimal(_) => "not_optimal",
            Error::MaxIter(_) => "max_iter",
            Error::Infeasible(_) => "infeasible",
            Error::InfeasibleCenter(_) => "infeasible_center",
            Error::UnboundedDirection(_) => "unbounded_direction",
            Error::DegenerateDirection(_) => "degenerate_direction",
            Error::EmptyValidation => "empty_validation",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }
}

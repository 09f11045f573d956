use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum RvmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A kernel entry came out non-finite.
    #[error("kernel construction failed at pair ({i}, {j}): {reason}")]
    Construction { i: usize, j: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Numerical failure inside a Gibbs sweep, tagged with the iteration index.
    #[error("numerical failure at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<RvmError>,
    },

    #[error("unsupported size: {0}")]
    Unsupported(String),

    #[error("grid range too narrow: {edge_mass:.4} of the posterior weight sits on edge nodes")]
    RangeTooNarrow { edge_mass: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RvmError {
    /// True for failures of the numerical kind (factorizations, samplers, quadratic forms).
    pub fn is_numerical(&self) -> bool {
        match self {
            RvmError::Numerical(_) | RvmError::Construction { .. } => true,
            RvmError::Iteration { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, RvmError>;

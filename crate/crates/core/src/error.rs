use thiserror::Error;

pub type Result<T> = std::result::Result<T, MmfaError>;

#[derive(Debug, Error)]
pub enum MmfaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("numerical failure at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<MmfaError>,
    },

    #[error("fit with K = {k} failed: {source}")]
    Candidate {
        k: usize,
        #[source]
        source: Box<MmfaError>,
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MmfaError {
    /// Strips iteration/candidate wrappers and returns the underlying error.
    pub fn root(&self) -> &MmfaError {
        match self {
            MmfaError::AtIteration { source, .. } | MmfaError::Candidate { source, .. } => {
                source.root()
            }
            other => other,
        }
    }
}

impl From<serde_json::Error> for MmfaError {
    fn from(e: serde_json::Error) -> Self {
        MmfaError::Schema(e.to_string())
    }
}

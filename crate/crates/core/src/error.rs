use thiserror::Error;

/// Errors raised by the numerical and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("series did not converge: {0}")]
    SeriesDivergence(String),

    #[error("sinkhorn solver failed (epsilon = {epsilon:e}, cost scale = {cost_scale:e}): {detail}")]
    SolverFailure {
        epsilon: f64,
        cost_scale: f64,
        detail: String,
    },

    #[error("{term} term failed: {source}")]
    Labeled {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("support of {atoms} atoms exceeds the cap of {cap}; reduce with subsample_particles")]
    SupportCap { atoms: usize, cap: usize },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn labeled(self, term: &'static str) -> Self {
        Error::Labeled {
            term,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

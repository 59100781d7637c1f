use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },

    #[error("input contains no loss records")]
    EmptyInput,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("too few exceedances: {got} < {min}")]
    TooFewExceedances { got: usize, min: usize },

    #[error("degenerate likelihood: {0}")]
    Degenerate(String),

    #[error("optimizer did not converge (final gradient norm {grad_norm:.3e})")]
    NonConvergence { grad_norm: f64 },

    #[error("fitted shape xi = {xi:.4} is not in the heavy-tailed regime (xi > 0)")]
    NotHeavyTailed { xi: f64 },

    #[error("margin {margin}: {source}")]
    Margin {
        margin: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("zero normalization denominator on every coordinate; choose another normalization coordinate")]
    ZeroDenominator,

    #[error("failure budget exceeded: {failed} of {total} replications failed")]
    FailureBudget { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_margin(self, margin: usize) -> Error {
        Error::Margin {
            margin,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

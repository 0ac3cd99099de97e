use thiserror::Error;

use crate::model::VariationalState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {block}: expected {expected}, found {found}")]
    Shape {
        block: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid dataset:\n{}", .0.join("\n"))]
    InvalidData(Vec<String>),

    #[error("domain error in {func}: {msg}")]
    Domain { func: &'static str, msg: String },

    #[error("matrix {what} is not positive definite (smallest pivot {pivot:e})")]
    NotPositiveDefinite { what: &'static str, pivot: f64 },

    #[error("non-finite quadrature result for B^({order})(mu={mu}, sigma={sigma})")]
    Quadrature { order: usize, mu: f64, sigma: f64 },

    #[error("exponent overflow in cluster {cluster}, row {row} (exponent {exponent:.1}); consider rescaling covariates")]
    Overflow {
        cluster: usize,
        row: usize,
        exponent: f64,
    },

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("lower bound decreased at iteration {iteration}: {previous} -> {current}")]
    ElboDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("fit aborted at iteration {iteration}: {source}")]
    FitAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
        state: Box<VariationalState>,
    },

    #[error("fits were computed on different datasets ({0} vs {1})")]
    DatasetMismatch(String, String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(block: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            block,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

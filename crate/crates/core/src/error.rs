use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("dataset '{0}' is empty")]
    EmptyDataset(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("non-finite value while evaluating sample {sample_id}: {what}")]
    Numeric { sample_id: usize, what: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { expected: usize, got: usize },

    #[error("relative change undefined for class {class}: previous accuracy is zero")]
    UndefinedChange { class: usize },

    #[error("explicit Hessian requested for {params} parameters (cap is {cap})")]
    Capacity { params: usize, cap: usize },

    #[error("Hessian is not positive definite; increase damping (currently {damping:e})")]
    NotPositiveDefinite { damping: f64 },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("influence solve failed for sample {row}, class {class}: {source}")]
    InfluenceSolve {
        row: usize,
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("every GA candidate was infeasible")]
    AllInfeasible,

    #[error("commit refused: {0}")]
    CommitRefused(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("removal would empty class {class}")]
    EmptiedClass { class: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("linear program: {0}")]
    Lp(#[from] crate::pareto::lp::SimplexError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

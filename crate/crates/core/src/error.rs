use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("cluster index {index} out of range (K = {clusters})")]
    ClusterIndex { index: usize, clusters: usize },

    #[error("Riccati solver diverged ({equation}) at t = {time}")]
    SolverDivergence { equation: String, time: f64 },

    #[error("simulation diverged at step {step} (path {path})")]
    SimulationDivergence { path: usize, step: usize },

    #[error("estimator diverged for cluster {cluster} at step {step} (path {path})")]
    EstimatorDivergence {
        path: usize,
        cluster: usize,
        step: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("agent trajectories were not retained; rerun with retention enabled")]
    MissingTrajectories,

    #[error("stacked system too large: N*n = {size} exceeds the limit of {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single broken workload invariant. `task` is the offending task index
/// when the violation is per-task.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub task: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.task {
            Some(k) => write!(f, "task {k}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("queue is unstable at this allocation (rho = {rho})")]
    Unstable { rho: f64 },

    #[error("invalid workload: {}", join_violations(.0))]
    InvalidWorkload(Vec<Violation>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{0}")]
    Capability(String),

    #[error("rounding lower bound unavailable: {0}")]
    BoundUnavailable(String),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

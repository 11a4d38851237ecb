use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SacError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("linear solver error: {0}")]
    Solver(String),

    /// Newton (and fallback) iteration did not reach the tolerance.
    #[error("step failed after {iterations} iterations (last residual {residual:.3e})")]
    StepFailure { iterations: usize, residual: f64 },

    /// A step failure inside a trajectory, tagged with the step index (1-based).
    #[error("trajectory failed at step {step}: {source}")]
    Trajectory {
        step: usize,
        #[source]
        source: Box<SacError>,
    },

    /// A failure inside an experiment, tagged with where it happened.
    #[error("experiment failed at level {level}, path {path}: {source}")]
    Experiment {
        level: usize,
        path: u64,
        #[source]
        source: Box<SacError>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SacError {
    fn from(e: std::io::Error) -> Self {
        SacError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SacError>;

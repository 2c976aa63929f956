use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsmError>;

/// One optimizer iteration, kept so non-convergence can be reported with its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Error)]
pub enum DsmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: row {row}, column '{column}': {message}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{file}: missing column '{column}'")]
    MissingColumn { file: String, column: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("validation failed:\n{0}")]
    Validation(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence {
        what: String,
        iterations: usize,
        trace: Vec<IterationRecord>,
    },

    #[error("{what}: matrix is singular or indefinite (condition number {condition:.3e})")]
    Singular { what: String, condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),
}

impl DsmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DsmError::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        DsmError::Numerical(msg.into())
    }

    /// Process exit code: 2 for bad input, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DsmError::Io { .. }
            | DsmError::Parse { .. }
            | DsmError::MissingColumn { .. }
            | DsmError::InvalidInput(_)
            | DsmError::Validation(_)
            | DsmError::Config(_) => 2,
            DsmError::NonConvergence { .. } | DsmError::Singular { .. } | DsmError::Numerical(_) => 3,
        }
    }

    /// Iteration trace for non-convergence errors, formatted one line per iteration.
    pub fn trace_lines(&self) -> Vec<String> {
        match self {
            DsmError::NonConvergence { trace, .. } => trace
                .iter()
                .map(|r| {
                    format!(
                        "iter {:>4}  objective {:.10e}  |grad| {:.3e}",
                        r.iteration, r.objective, r.gradient_norm
                    )
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

use thiserror::Error;

/// Exit status for configuration and input problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when a solver fails inside a cell.
pub const EXIT_SOLVER: i32 = 3;
/// Exit status when everything ran but some pass threshold was missed.
pub const EXIT_THRESHOLD: i32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver failed in cell case={case} scheme={scheme} backend={backend} J={steps}: {source}")]
    Cell {
        case: String,
        scheme: u8,
        backend: String,
        steps: usize,
        #[source]
        source: bsee_core::Error,
    },

    #[error("control rate study failed: {0}")]
    Control(#[source] bsee_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Cell { .. } | HarnessError::Control(_) => EXIT_SOLVER,
            _ => EXIT_CONFIG,
        }
    }
}

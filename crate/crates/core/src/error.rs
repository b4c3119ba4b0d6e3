use thiserror::Error;

pub type Result<T> = std::result::Result<T, CbtError>;

#[derive(Debug, Error)]
pub enum CbtError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: String, step: usize },

    #[error("checkpoint is not a CBTK file")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint tensor {name}: stored shape {stored:?} does not match model shape {expected:?}")]
    CheckpointShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CbtError {
    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            CbtError::Config(_) | CbtError::Json(_) => 2,
            CbtError::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}

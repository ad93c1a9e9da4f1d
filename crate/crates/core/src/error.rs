use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): expected x1 < x2 and y1 < y2 with finite coordinates")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBox { .. } => "invalid_box",
            Error::Validation(_) => "validation",
            Error::Generation(_) => "generation",
            Error::Training(_) => "training",
            Error::Evaluation(_) => "evaluation",
            Error::Gradcheck(_) => "gradcheck",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

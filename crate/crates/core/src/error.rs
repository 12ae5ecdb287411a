use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite activation in {stage} (layer {layer})")]
    Numeric { stage: &'static str, layer: usize },

    #[error("numeric contract violated: {0}")]
    Contract(String),

    #[error("label {label} out of range for {what} (size {size})")]
    Lookup {
        what: &'static str,
        label: usize,
        size: usize,
    },

    #[error("freeze contract violated: parameter group {group} changed during stage {stage}")]
    FreezeViolation { group: String, stage: u8 },

    #[error("no valid queries under protocol {0}")]
    NoValidQueries(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Lookup { .. } | Error::Shape(_) | Error::Checkpoint(_) => 2,
            Error::Numeric { .. } | Error::Contract(_) | Error::NoValidQueries(_) => 3,
            Error::FreezeViolation { .. } => 4,
            Error::Tensor(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => 1,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Spatial size incompatible with the pyramid depth and no padding was requested.
    #[error("padding required: {height}x{width} is not divisible by {multiple} (set pad_policy = \"reflect\")")]
    PaddingRequired {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("non-finite {what} at step {step}: {value}")]
    NonFinite {
        what: &'static str,
        step: u64,
        value: f64,
    },

    #[error("timestep {t} out of range for a schedule with T={steps}")]
    Timestep { t: usize, steps: usize },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable machine-readable code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::PaddingRequired { .. } => "E_PADDING",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Timestep { .. } => "E_TIMESTEP",
            Error::Candle(_) => "E_TENSOR",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::SafeTensors(_) => "E_CONTAINER",
        }
    }
}

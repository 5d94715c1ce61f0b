use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ksdiff::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "E_USAGE",
            CliError::Image(_) => "E_IMAGE",
            CliError::Io(_) => "E_IO",
            CliError::Json(_) => "E_JSON",
        }
    }

    /// Process exit status for this error class.
    pub fn exit_status(&self) -> u8 {
        match self.code() {
            "E_USAGE" | "E_CONFIG" | "E_PADDING" => 2,
            "E_DATA" | "E_IO" | "E_IMAGE" | "E_JSON" => 3,
            "E_CHECKPOINT" => 4,
            "E_NONFINITE" => 5,
            _ => 1,
        }
    }

    /// `error[CODE]: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.code(), msg.trim())
    }
}

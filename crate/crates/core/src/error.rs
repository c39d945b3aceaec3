use thiserror::Error;

#[derive(Debug, Error)]
pub enum NimbusError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("procedural cloud is empty: {0}")]
    EmptyField(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Tape(#[from] ndtape::TapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NimbusError>;

impl NimbusError {
    /// Process exit code by failure class: 1 config, 2 numerical, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            NimbusError::Config(_) | NimbusError::Json(_) | NimbusError::Contract(_) => 1,
            NimbusError::Numerical(_) | NimbusError::EmptyField(_) | NimbusError::Tape(_) => 2,
            NimbusError::Io(_) | NimbusError::Format(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NimbusError::Config(_) => "config",
            NimbusError::Contract(_) => "contract",
            NimbusError::Numerical(_) => "numerical",
            NimbusError::EmptyField(_) => "empty_field",
            NimbusError::Format(_) => "format",
            NimbusError::Tape(_) => "tape",
            NimbusError::Io(_) => "io",
            NimbusError::Json(_) => "json",
        }
    }
}

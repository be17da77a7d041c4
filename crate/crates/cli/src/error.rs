use thiserror::Error;

/// Failures split by exit code: bad input is 2, anything that goes wrong
/// while a stage runs is 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::Validation(message.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Tags any displayable error with the stage it came from.
pub trait StageExt<T> {
    fn at(self, stage: &'static str) -> Result<T>;
}

impl<T, E: std::fmt::Display> StageExt<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}

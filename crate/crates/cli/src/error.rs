use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fsm_core::Error),
}

impl CliError {
    /// Process exit code: 2 for configuration and validation problems,
    /// 1 for any other failure.
    pub fn exit_code(&self) -> i32 {
        use fsm_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Invalid(_) | E::Validation(_) | E::Manifest { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

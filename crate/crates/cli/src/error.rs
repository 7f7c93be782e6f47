use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or command-line input.
    #[error("{0}")]
    Config(String),

    /// Required artifacts are missing or unreadable.
    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] recsep::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    /// 2 for configuration and input errors, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        use recsep::Error as E;
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(
                E::InvalidParameter { .. }
                | E::InvalidStft(_)
                | E::InfeasibleOverlap { .. }
                | E::DependencyRequiresSequential(_)
                | E::PermutationSearchTooLarge { .. }
                | E::UnsupportedWav(_)
                | E::InputTooShort { .. },
            ) => 2,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fmpestf::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for data and I/O, 4 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        use fmpestf::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::GradCheck(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Checkpoint(_) | E::Json(_) => 2,
                E::NonFinite { .. } => 4,
                E::Io { .. } | E::Format { .. } | E::Dimension { .. } | E::Contract(_) | E::Index { .. } => 3,
            },
        }
    }
}

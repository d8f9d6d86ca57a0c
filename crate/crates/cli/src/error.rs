use thiserror::Error;

/// Failures surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("input: {0}")]
    Input(String),

    #[error("{0}")]
    Core(#[from] sdrl_core::Error),

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 malformed input, 3 solver failure, 4 training abort, 5 bound violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(e) => core_code(e),
            CliError::BoundViolation(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

fn core_code(e: &sdrl_core::Error) -> i32 {
    use sdrl_core::Error as E;
    match e {
        E::SolverFailure { .. } | E::Overflow(_) | E::SeriesDivergence(_) => 3,
        E::Labeled { source, .. } => core_code(source),
        E::TrainingAborted { .. } => 4,
        E::Io(_) => 1,
        E::InvalidInput(_) | E::InvalidParameter { .. } | E::SupportCap { .. } | E::Csv(_) | E::Json(_) => 2,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

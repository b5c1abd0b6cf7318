use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] cbit_core::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(cbit_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        };
        ExitCode::from(code)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

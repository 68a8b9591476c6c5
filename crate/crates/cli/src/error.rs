use thiserror::Error;

/// Harness failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<cldm_core::Error> for CliError {
    fn from(e: cldm_core::Error) -> Self {
        use cldm_core::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite { .. } | E::Numeric(_) => CliError::Numeric(msg),
            E::Format(_) | E::Io(_) => CliError::Io(msg),
            E::InvalidArgument(_) | E::Shape { .. } | E::Timestep { .. } | E::ClassIndex { .. } => {
                CliError::Config(msg)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

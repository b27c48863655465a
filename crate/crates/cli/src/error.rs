use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<jkoflow::Error> for CliError {
    fn from(e: jkoflow::Error) -> Self {
        use jkoflow::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) => CliError::Config(msg),
            E::DimensionMismatch { .. } | E::EmptyCloud | E::Format { .. } | E::Io { .. } => CliError::Data(msg),
            E::NonFinite(_) | E::NotConverged { .. } | E::Autodiff(_) => CliError::Numeric(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

use dsn3d_core::Error;
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
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

    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "E_CONFIG",
            CliError::Data(_) => "E_DATA",
            CliError::Numeric(_) => "E_NUMERIC",
        }
    }

    /// `error[E_...]: message` on a single line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.tag())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Param(_) => CliError::Config(e.to_string()),
            Error::Numeric { .. } | Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reclassifies any core failure as a data error; used around file loading.
pub fn data<T>(r: dsn3d_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Numeric { .. } | Error::NonFinite(_) => CliError::Numeric(e.to_string()),
        _ => CliError::Data(e.to_string()),
    })
}

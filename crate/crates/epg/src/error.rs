use std::path::PathBuf;

/// Failures surfaced by the command layer, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Format { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> CliError {
        CliError::Format { path: path.into(), detail: detail.to_string() }
    }
}

impl From<epg_core::Error> for CliError {
    fn from(e: epg_core::Error) -> Self {
        use epg_core::Error as E;
        match e {
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::Config(_) | E::Dimension { .. } | E::OutOfRange { .. } | E::UnknownFamily(_) | E::Shape { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Format { path: PathBuf::from("<csv>"), detail: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

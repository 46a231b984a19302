use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A manifest or dataset invariant was violated. `field` is a json-style path.
    #[error("invalid dataset at {field}: {msg}")]
    Data { field: String, msg: String },

    #[error("invalid configuration at {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the command line front end.
    ///
    /// | code | meaning                         |
    /// |------|---------------------------------|
    /// | 2    | configuration / argument error  |
    /// | 3    | dataset error                   |
    /// | 4    | numerical failure               |
    /// | 5    | i/o error                       |
    /// | 6    | template mismatch               |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::Data { .. } | Error::Json { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 5,
            Error::TemplateMismatch(_) => 6,
        }
    }
}

use std::path::PathBuf;

/// Errors raised anywhere in the retrieval pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },
    #[error("no lunar illumination: lunar zenith angle {0} deg is at or below the horizon")]
    Illumination(f64),
    #[error("degenerate integral: {0}")]
    Degenerate(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            _ => 4,
        }
    }
}

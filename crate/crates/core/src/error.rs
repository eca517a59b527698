use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is invalid (bad size, non-integral output, unknown mode).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's contract (non-scalar loss, missing checkpoint, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A file could not be parsed.
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    /// Training produced a non-finite loss.
    #[error("divergence at iteration {iter}: loss = {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
        }
    }
}

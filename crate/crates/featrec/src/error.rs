use std::fmt;
use std::io;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure, with the path involved when known.
    Io { path: PathBuf, source: io::Error },
    /// A raster file could not be decoded or encoded.
    Image { path: PathBuf, message: String },
    /// A container file is malformed (bad magic, version, checksum, truncation).
    Format { path: PathBuf, message: String },
    /// Tensor or layer shapes do not line up.
    Shape { message: String },
    /// Invalid argument or inconsistent configuration.
    Validation { message: String },
    /// Dataset directory tree does not match the expected layout.
    Manifest { message: String },
    /// A metric is undefined on the given input (e.g. single-class labels).
    UndefinedMetric { message: String },
    /// Training produced a non-finite loss.
    Divergence { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape {
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            message: message.into(),
        }
    }

    pub fn manifest(message: impl Into<String>) -> Self {
        Error::Manifest {
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 I/O, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Image { path, message } => {
                write!(f, "image error on {}: {message}", path.display())
            }
            Error::Format { path, message } => {
                write!(f, "format error in {}: {message}", path.display())
            }
            Error::Shape { message } => write!(f, "shape error: {message}"),
            Error::Validation { message } => write!(f, "validation error: {message}"),
            Error::Manifest { message } => write!(f, "manifest error: {message}"),
            Error::UndefinedMetric { message } => write!(f, "undefined metric: {message}"),
            Error::Divergence { epoch, batch, loss } => write!(
                f,
                "training diverged at epoch {epoch}, batch {batch}: loss = {loss}"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

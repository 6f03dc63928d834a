use std::path::PathBuf;

/// Errors produced anywhere in the fusion/segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label color {color:?} at ({x}, {y}) is not in the palette")]
    UnknownColor { color: [u8; 3], x: u32, y: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("every pixel of the target is ignored")]
    EmptyTarget,

    #[error("confusion matrix has no counted pixels")]
    EmptyMatrix,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptBlob(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 = configuration, 3 = data / checkpoint, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            Error::Tensor(_) => 4,
            Error::Decode { .. }
            | Error::ShapeMismatch(_)
            | Error::UnknownColor { .. }
            | Error::EmptyTarget
            | Error::EmptyMatrix
            | Error::VersionMismatch { .. }
            | Error::CorruptBlob(_)
            | Error::Io { .. } => 3,
        }
    }
}

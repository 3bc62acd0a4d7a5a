use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown configuration key(s): {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error(transparent)]
    Core(#[from] vlprompt_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("config hash {config} differs from checkpoint hash {checkpoint}; pass --accept-config-mismatch to continue")]
    HashMismatch { config: String, checkpoint: String },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKeys(_) | Error::HashMismatch { .. } | Error::Exists(_) => 2,
            Error::Core(vlprompt_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }
}

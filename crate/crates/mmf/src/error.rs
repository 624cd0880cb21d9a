use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Core(#[from] mmf_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("feature/codebook dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("code {code} at frame {frame}, layer {layer} is out of range (n_entries = {n_entries})")]
    CodeOutOfRange {
        frame: usize,
        layer: usize,
        code: usize,
        n_entries: usize,
    },
    #[error("sequence pattern violated at position {pos}: {msg}")]
    Pattern { pos: usize, msg: String },
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] duotts_nn::CheckpointError),
    #[error("bad file format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

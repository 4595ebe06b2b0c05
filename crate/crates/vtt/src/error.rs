use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// Every variant carries enough context (byte offset, line number, tensor
/// name) to point at the offending input without re-parsing it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Decode { offset: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary parse error at line {line}: {msg}")]
    VocabParse { line: usize, msg: String },

    #[error("checkpoint parse error at byte offset {offset}: {msg}")]
    CheckpointParse { offset: u64, msg: String },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("cannot segment input: {msg} at character offset {char_offset}")]
    Segmentation { char_offset: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid tensor {tensor}: {msg}")]
    Validation { tensor: String, msg: String },

    #[error("task file error at line {line}: {msg}")]
    TaskParse { line: usize, msg: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    AtPath {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_line(self, line: usize) -> Self {
        Error::AtLine {
            line,
            source: Box::new(self),
        }
    }

    pub fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::AtPath {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} samples, got {actual}")]
    InvalidLength { expected: usize, actual: usize },

    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("cross-speaker source required")]
    CrossSpeakerSourceRequired,

    #[error("at least 2 speakers are required (inter-speaker negatives and cross-speaker attacks), got {0}")]
    TooFewSpeakers(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate speaker: mean embedding has zero norm")]
    DegenerateSpeaker,

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("inter-speaker negatives unavailable: batch has a single speaker")]
    InterSpeakerNegativesUnavailable,

    #[error("Stage I requires real speech only (found spoof utterance {0})")]
    StageOneRequiresReal(String),

    #[error("EER needs at least one bona fide and one spoof trial")]
    SingleClass,

    #[error("no bona fide trials")]
    NoBonafide,

    #[error("unknown utterance {0}")]
    UnknownUtterance(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad user input: malformed config, manifest, or interactions document.
    Usage,
    /// Filesystem or decoding trouble.
    Io,
    /// The measurement or fitting pipeline refused its inputs.
    Pipeline,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported audio format in {path}: {message}")]
    UnsupportedFormat { path: PathBuf, message: String },
    #[error("{path} contains no audio samples")]
    EmptyAudio { path: PathBuf },
    #[error("sample rate {0} Hz not supported (expected 44100 or 48000)")]
    UnsupportedSampleRate(u32),
    #[error("sample rate mismatch: reference {reference} Hz, test {test} Hz")]
    SampleRateMismatch { reference: u32, test: u32 },
    #[error("durations differ by {seconds:.3} s (limit 1 s)")]
    DurationMismatch { seconds: f64 },
    #[error("cross-correlation peak is ambiguous (normalized peak {peak:.4}); signals look unrelated")]
    AmbiguousAlignment { peak: f64 },
    #[error("signal of {len} samples is shorter than one frame ({frame} samples)")]
    SignalTooShort { len: usize, frame: usize },
    #[error("invalid frame plan: {0}")]
    InvalidFramePlan(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("constant vector: {0}")]
    ConstantVector(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),
    #[error("model not trained")]
    Untrained,
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("model version {found:?} not supported (expected {expected:?})")]
    ModelVersion { found: String, expected: String },
    #[error("row {row} ({item_id}/{condition}): {source}")]
    Row {
        row: usize,
        item_id: String,
        condition: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::UnsupportedFormat { .. }
            | Error::EmptyAudio { .. } => ErrorKind::Io,
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Json { .. }
            | Error::ModelVersion { .. } => ErrorKind::Usage,
            Error::Row { source, .. } => source.kind(),
            _ => ErrorKind::Pipeline,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("waveform too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("bad frequency range [{f_min}, {f_max}] Hz: {reason}")]
    BadRange { f_min: f64, f_max: f64, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("model has no embedding mean statistics")]
    MissingStats,

    #[error("features were extracted with a different front-end than the model expects")]
    FrontendMismatch,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate embedding: norm below 1e-12")]
    DegenerateEmbedding,

    #[error("score set has no {0} trials")]
    EmptyClass(&'static str),

    #[error("stream {0} has a single distinct score value")]
    ConstantScores(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// True when the error stems from a malformed or unsupported input file
    /// rather than from a failure during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Malformed { .. } | Error::UnsupportedFormat(_) | Error::InvalidConfig(_)
        )
    }
}

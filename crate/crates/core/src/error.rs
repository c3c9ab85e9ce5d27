use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("unknown value kind {kind:?} at byte {offset}")]
    UnknownKind { offset: usize, kind: String },

    #[error("payload length mismatch at byte {offset}: expected {expected} bytes, found {found}")]
    PayloadLength {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: usize },

    #[error("payload checksum mismatch at byte {offset}: header {expected}, payload {found}")]
    Checksum {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("value {value} at voxel {index} is not in the label alphabet {alphabet:?}")]
    LabelOutOfAlphabet {
        index: usize,
        value: f64,
        alphabet: Vec<u8>,
    },

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible phantom spec: {0}")]
    Infeasible(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_good: Box<crate::model::ToyModel>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parsable category used by the CLI for exit codes and error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader { .. }
            | Error::UnknownKind { .. }
            | Error::PayloadLength { .. }
            | Error::NonFiniteValue { .. }
            | Error::Checksum { .. }
            | Error::Json(_) => "format",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::LabelOutOfAlphabet { .. } => "label-alphabet",
            Error::EmptyClass(_) => "empty-class",
            Error::Degenerate(_) => "degenerate",
            Error::OutOfRange(_) => "out-of-range",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Infeasible(_) => "infeasible",
            Error::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

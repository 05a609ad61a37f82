use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("topology mismatch: expected {expected} joints, got {actual}")]
    TopologyMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged in stage `{stage}` at epoch {epoch}: loss = {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        loss: f64,
    },

    #[error("degenerate embedding extent on axis {0}")]
    DegenerateExtent(usize),

    #[error("no populated codebook cell within radius {radius} of ({row}, {col})")]
    NoPopulatedCell { row: usize, col: usize, radius: f64 },

    #[error("cell ({row}, {col}) outside the {m}x{m} grid")]
    CellOutOfRange { row: usize, col: usize, m: usize },

    #[error("no confident future: no modes above threshold and budget expansion exhausted")]
    NoConfidentFuture,

    #[error("unknown sample id {0}")]
    UnknownSample(usize),
}

impl Error {
    /// An I/O failure while touching `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

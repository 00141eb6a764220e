use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("image set is empty")]
    EmptySet,

    #[error("image {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    ImageSize {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("mask count mismatch: {masks} masks for {images} images")]
    MaskCount { images: usize, masks: usize },

    #[error("mask {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    MaskSize {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("ground-truth masks are required but missing")]
    MissingMasks,

    #[error("pairwise update needs two distinct images, got i == j == {0}")]
    SelfEdge(usize),

    #[error("aggregation over an empty update list (single-image set)")]
    EmptyUpdates,

    #[error("k = {k} is out of range for {p} prompts")]
    TopKRange { k: usize, p: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no fixture embedding recorded for {kind} key {key}")]
    FixtureMiss { kind: &'static str, key: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid prompt template {0:?}: expected exactly one [CLASS] slot")]
    PromptTemplate(String),

    #[error("duplicate rendered prompt {0:?}")]
    DuplicatePrompt(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("fixture file: {0}")]
    FixtureFile(String),

    #[error("weights file: {0}")]
    Weights(String),

    #[error("clip encoder process: {0}")]
    Encoder(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) => ErrorKind::Numerical,
            Error::Config(_) | Error::PromptTemplate(_) | Error::TopKRange { .. } => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dangling reference: {0}")]
    Reference(String),
    #[error("invariant `{invariant}` violated: {detail}")]
    Invariant {
        invariant: &'static str,
        detail: String,
    },
    #[error("degenerate extent along the {axis} axis")]
    DegenerateExtent { axis: char },
    #[error("unknown face id {0}")]
    UnknownFace(u32),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("feature footprint overflows its host face: {0}")]
    FootprintOverflow(String),
    #[error("host face {0} is not a planar rectangle")]
    NonPlanarHost(u32),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("generation hit the length cap after {} face tokens without an end token", .partial.len())]
    Truncated { partial: Vec<crate::codec::FaceLatent> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("oracle backend requires record context")]
    MissingRecordContext,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant {
            invariant,
            detail: detail.into(),
        }
    }
}

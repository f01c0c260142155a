//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or geometry are inconsistent.
    #[error("shape error: {0}")]
    Shape(String),

    /// Element values violate a precondition (non-finite, out of code range).
    #[error("data error: {0}")]
    Data(String),

    /// A configuration value is out of its valid range.
    #[error("config error: {0}")]
    Config(String),

    /// Positioned parse error in a network description.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },

    /// Container does not start with the `DLBR` magic bytes.
    #[error("bad magic: not a DLBR container")]
    BadMagic,

    /// Container version is not understood by this build.
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    /// Container ends before a declared payload does.
    #[error("truncated container: {0}")]
    Truncated(String),

    /// Container header is present but malformed.
    #[error("invalid header: {0}")]
    Header(String),

    /// Two blob payloads overlap in the container.
    #[error("overlapping blobs: {0}")]
    BlobOverlap(String),

    /// A layer references a blob that is not in the blob table.
    #[error("dangling blob reference: {0}")]
    DanglingBlob(String),

    /// A layer references a later layer, or the layer order is not topological.
    #[error("topology violation: {0}")]
    Topology(String),

    /// Graph validation produced one or more violations.
    #[error("graph validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Category of a graph validation violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    Topology,
    Precision,
    Blob,
}

/// One problem found by graph validation, tied to a layer where possible.
#[derive(Debug, Clone)]
pub struct Violation {
    pub layer: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.layer {
            Some(id) => write!(f, "[{}] {}", id, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Wrap a violation list, promoting a lone topology violation to the
    /// dedicated error value so callers can distinguish it.
    pub fn from_violations(violations: Vec<Violation>) -> Error {
        if violations.len() == 1 && violations[0].kind == ViolationKind::Topology {
            Error::Topology(violations[0].to_string())
        } else {
            Error::Validation(violations)
        }
    }
}

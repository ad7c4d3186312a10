use thiserror::Error;

/// Crate-wide error type. Every fallible public entry point returns this so
/// callers get one enum to match on instead of a zoo of per-module errors.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is out of range or internally inconsistent.
    /// Configs are validated at construction so forward passes can assume
    /// they hold.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data failed validation (boxes outside the unit square, empty
    /// clips, degenerate geometry and so on).
    #[error("invalid data: {0}")]
    Data(String),

    /// An API contract was broken, e.g. calling backward on a non-scalar
    /// or asking for a gradient that was never recorded.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Attention was asked to attend over an empty key/value set.
    #[error("{op}: empty key/value set")]
    EmptyKeys { op: &'static str },

    /// A NaN or infinity appeared where finite arithmetic was expected.
    /// `coord` is the flat index of the first offending element when known.
    #[error("{op}: non-finite value{}", fmt_coord(.coord))]
    NonFinite { op: &'static str, coord: Option<usize> },

    /// The synthetic generator could not satisfy its own constraints, e.g.
    /// too many objects for the frame to place disjointly.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Filesystem problems, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A serialized file (tensor, manifest, checkpoint, report) is malformed.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

fn fmt_coord(coord: &Option<usize>) -> String {
    match coord {
        Some(c) => format!(" at flat index {c}"),
        None => String::new(),
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

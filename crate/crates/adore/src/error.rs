use std::path::PathBuf;

/// Errors surfaced by fallible operations.
///
/// Contract violations (shape mismatches, out-of-range indices, calling an
/// eviction on a non-full cache) are programming errors and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A position or size exceeded a configured capacity.
    #[error("capacity exceeded: {what} ({got} > limit {limit})")]
    Capacity {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// A non-finite value showed up where training cannot continue.
    #[error("non-finite value in {context} at step {step}")]
    Numeric { context: &'static str, step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint or trace file failed to parse.
    #[error("bad file format: {0}")]
    Format(String),

    /// Invalid run configuration (missing checkpoint, m < K, ...).
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("degenerate spectrum: all-zero input has no normalized spectral mass")]
    DegenerateSpectrum,

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("training diverged at {stage}: {detail}")]
    Diverged { stage: String, detail: String },

    #[error("sampling failed: {failed} of {total} chains produced non-finite values")]
    SamplingFailed { failed: usize, total: usize },

    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

use thiserror::Error;

/// Library error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The normal equations are rank-deficient and no ridge term was applied.
    #[error("singular system: hidden matrix is rank-deficient and ridge is zero")]
    SingularSystem,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Ground-truth eye centers coincide, so the error metric is undefined.
    #[error("inter-pupil distance of the ground truth is zero")]
    DegenerateInterPupil,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("model container: {0}")]
    Container(String),

    #[error("failed to decode image {path}: {msg}")]
    Decode { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

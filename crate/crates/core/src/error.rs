use sketchdit_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("vocabulary error: unknown token {0:?}")]
    Vocabulary(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("integrity error in tensor {tensor}: {msg}")]
    Integrity { tensor: String, msg: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) => 3,
            Error::Io { .. } | Error::Tensor(TensorError::Io(_)) => 4,
            _ => 2,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e.into()) })
    }
}

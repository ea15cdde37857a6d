use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum FovxError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, token counts, non-numeric fields).
    #[error("format error: {0}")]
    Format(String),

    /// Valid file, but a feature outside the supported subset.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Inputs violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Grid/affine problems: mismatched geometry, singular affines.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Run configuration problems (missing splits, missing shells, bad keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problems discovered mid-run.
    #[error("data error: {0}")]
    Data(String),

    /// Model bundle container is internally inconsistent.
    #[error("corrupt bundle: {0}")]
    Corruption(String),

    /// Tensor shape mismatch in the network stack.
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<csv::Error> for FovxError {
    fn from(e: csv::Error) -> Self {
        FovxError::Format(e.to_string())
    }
}

impl FovxError {
    /// CLI exit code convention: 0 success, 2 config error, 3 data error,
    /// 1 unexpected failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            FovxError::Config(_) => 2,
            FovxError::Format(_)
            | FovxError::Unsupported(_)
            | FovxError::Validation(_)
            | FovxError::Geometry(_)
            | FovxError::Data(_)
            | FovxError::Corruption(_)
            | FovxError::Shape(_) => 3,
            FovxError::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, FovxError>;

//! Error type shared across the crate.

/// Errors returned by the core library.
///
/// `Numerical` is kept distinct from the validation variants because the
/// CLI maps it to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a precondition (bad shape parameter, value out
    /// of range, missing input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value was found where finite math is required.
    /// Carries the flat index of the first offending element.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numerical procedure failed (divergence, non-finite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Serialized data failed structural validation.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Returns the index of the first non-finite element, if any.
pub fn find_non_finite(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

/// Rejects slices containing NaN or infinities, naming the offending index.
pub fn ensure_finite(values: &[f64], context: &str) -> Result<()> {
    match find_non_finite(values) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

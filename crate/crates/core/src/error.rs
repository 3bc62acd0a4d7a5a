use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shape or width disagreement between configured components.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data does not match what an operation expects.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    /// A prompt does not fit in the text encoder's context window.
    #[error("prompt of {len} tokens exceeds context capacity {capacity}")]
    Truncation { len: usize, capacity: usize },
    /// Statistics that are undefined for the given input (e.g. a single position).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Zero-norm vectors and similar numerical failures.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Label or class-set rules of a generalization protocol were broken.
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    /// A loss term evaluated to NaN or infinity.
    #[error("non-finite loss (l_con={l_con}, l_ce={l_ce}, l_sem={l_sem})")]
    NonFinite { l_con: f64, l_ce: f64, l_sem: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl core::fmt::Display,
    actual: impl core::fmt::Display,
) -> Error {
    use alloc::string::ToString;
    Error::Shape {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

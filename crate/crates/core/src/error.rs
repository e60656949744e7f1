use alloc::string::String;

/// Rejected inputs and runtime failures.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("{what} index {index} out of range for length {len}")]
    Index { what: &'static str, index: usize, len: usize },
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite loss `{name}` at step {step}")]
    NonFinite { name: String, step: u64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dim { what, expected, got })
    }
}

pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid { what, detail: detail.into() }
}

use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Argument` covers invalid indices, malformed tensors, and configuration
/// mistakes. `Capacity` is raised by the brute-force evaluators when the
/// requested instance would exceed their enumeration guards.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity guard exceeded: {0}")]
    Capacity(String),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (unknown prompt, bad trajectory, empty dataset, ...).
    #[error("input error: {0}")]
    Input(String),

    /// The requested trajectory space exceeds the enumeration cap.
    #[error("capacity error: {count} trajectories exceed the enumeration cap of {cap}; use backward recursion instead")]
    Capacity { count: u128, cap: u64 },

    /// Mathematical domain violation (support mismatch, zero normalizer, clamped reference).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

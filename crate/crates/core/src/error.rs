use thiserror::Error;

/// Errors raised by the simulation, circuit and analysis layers.
#[derive(Debug, Error)]
pub enum VqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid qubit index: {0}")]
    Qubit(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("gate is not unitary (deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("singular channel: |det| = {0:.3e}")]
    SingularChannel(f64),
    #[error("parameter slot {0} is bound to a gate without a two-term shift rule")]
    NotShiftable(usize),
    #[error("objective returned a non-finite value at iteration {iter}: {value}")]
    NonFinite { iter: usize, value: f64 },
    #[error("too many qubits for this backend: {0}")]
    TooLarge(usize),
    #[error("unsupported on this backend: {0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, VqError>;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {op}{}", detail_suffix(.detail))]
    NonFinite { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{0} is outside the support of the conditional distribution")]
    OutOfSupport(f64),

    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn detail_suffix(detail: &str) -> String {
    if detail.is_empty() {
        String::new()
    } else {
        format!(" ({detail})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

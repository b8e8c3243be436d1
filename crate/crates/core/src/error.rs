use thiserror::Error;

/// Unified error type for the whole engine. Variants are grouped by how a
/// caller should react, and each group maps to a stable process exit code
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad field values, inconsistent model settings,
    /// unknown config keys, shape mismatches at model build time.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch. Kept separate from `Config` so messages can
    /// name both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid input data: malformed files, empty corpora, out-of-vocab ids,
    /// out-of-range arguments.
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// API misuse, e.g. backward on a non-scalar loss.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for CLI reporting: 2 config, 3 input, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => 2,
            Error::Input(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

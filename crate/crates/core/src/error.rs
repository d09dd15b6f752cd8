use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A precondition on how an operation is called was violated.
    #[error("usage error: {0}")]
    Usage(String),
    /// Configuration rejected before any computation (including CFL audits).
    #[error("configuration error: {0}")]
    Config(String),
    /// A structural check on computed data failed (e.g. convexity of a slice).
    #[error("diagnostic error: {0}")]
    Diagnostic(String),
    /// Non-finite values appeared while time stepping.
    #[error("numerical abort at layer {layer}: {msg}")]
    Numerical { layer: usize, msg: String },
    #[error("unsupported regime: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Usage(_) | Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Diagnostic(_) | Error::Numerical { .. } => 3,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

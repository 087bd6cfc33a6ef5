use thiserror::Error;

/// Errors produced by the quantization library.
#[derive(Debug, Error)]
pub enum Error {
    /// A file does not match the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// Inputs violate a precondition (shape, range, non-finite value, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine could not produce a trustworthy result.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative solver stopped before meeting its tolerances.
    #[error(
        "numerical error: solver did not converge after {iterations} iterations \
         (max violation {violation:.3e}, relative dual change {dual_change:.3e})"
    )]
    NotConverged {
        iterations: usize,
        violation: f64,
        dual_change: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}

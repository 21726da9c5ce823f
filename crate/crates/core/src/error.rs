//! Error type shared across the crate.
//!
//! Variants are grouped by how a caller should react: `Data` (and the I/O
//! wrappers) mean the input is unusable, the remaining variants mean the
//! numerics failed on valid input. The CLI maps the former to exit code 2
//! and the latter to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent input data (schema, invariants, domain).
    #[error("data error: {0}")]
    Data(String),

    /// Design matrix numerically rank-deficient.
    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    /// Instrument does not move treatment received.
    #[error("weak or null instrument: {0}")]
    WeakInstrument(String),

    /// Numerical failure (non-finite objective, boundary estimate,
    /// failed factorization, too many failed resamples, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the error indicates bad input rather than failed numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Io(_) | Error::Csv(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

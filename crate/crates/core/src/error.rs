use alloc::string::String;
use chrono::NaiveDate;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Input data violates a documented invariant.
    Data,
    /// A numerical routine failed (non-SPD matrix, optimizer, range).
    Numerical,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("negative wind speed {value} at site {site}, day {day}")]
    NegativeSpeed { site: u32, day: usize, value: f64 },
    #[error("non-finite value at site {site}, day {day}")]
    NonFinite { site: u32, day: usize },
    #[error("duplicate site id {0}")]
    DuplicateSite(u32),
    #[error("unknown site id {0}")]
    UnknownSite(u32),
    #[error("date {0} outside calendar range")]
    DateOutOfRange(NaiveDate),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank-deficient design at site {site}")]
    RankDeficient { site: u32 },
    #[error("nonstationary autoregressive fit at site {site} (spectral radius >= 1)")]
    NonstationaryAr { site: u32 },
    #[error("matrix not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("value {value} outside the range of the inverse transform for lambda {lambda} (bound {bound})")]
    TransformRange { value: f64, lambda: f64, bound: f64 },
    #[error("inverse transform out of range at site {site}, day {day}: {value} (lambda {lambda}, bound {bound})")]
    AdjustRange { site: u32, day: usize, value: f64, lambda: f64, bound: f64 },
    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),
    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),
    #[error("singular system: {0}")]
    Singular(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_)
            | Error::Shape(_)
            | Error::NegativeSpeed { .. }
            | Error::NonFinite { .. }
            | Error::DuplicateSite(_)
            | Error::UnknownSite(_)
            | Error::DateOutOfRange(_)
            | Error::InsufficientData(_) => ErrorKind::Data,
            Error::RankDeficient { .. }
            | Error::NonstationaryAr { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::TransformRange { .. }
            | Error::AdjustRange { .. }
            | Error::NonConvergence(_)
            | Error::NonFiniteObjective(_)
            | Error::Singular(_) => ErrorKind::Numerical,
        }
    }
}

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown subcarrier map profile `{0}`")]
    UnknownProfile(String),

    #[error("subcarrier map does not partition {expected} subcarriers (got {actual} roles)")]
    BadPartition { expected: usize, actual: usize },

    #[error("bit count {0} is not a multiple of the bits per symbol")]
    OddBitCount(usize),

    #[error("unsupported subcarrier count {0} (the 802.11 profile needs 64)")]
    UnsupportedSubcarriers(usize),

    #[error("outside the validity region of the approximation: {0}")]
    OutsideApproximation(String),

    #[error("distribution parameter must be non-negative, got {0}")]
    NegativeParameter(f64),

    #[error("correlation matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("zero channel vector for user {user} at dAP {dap}")]
    ZeroChannel { user: usize, dap: usize },

    #[error("channel matrix is rank deficient (condition number {cond:e})")]
    Singular { cond: f64 },

    #[error("all pilot tones are zero")]
    ZeroPilots,

    #[error("empty input")]
    Empty,

    #[error("known reference is zero at subcarrier {0}")]
    ZeroReference(usize),

    #[error("correlation magnitude too small to estimate a frequency offset")]
    NoSignal,

    #[error("missing antennas: expected {expected}, got {actual}")]
    MissingAntennas { expected: usize, actual: usize },

    #[error("dataset `{0}` not found in file")]
    MissingDataset(String),

    #[error("shape mismatch in `{path}`{}: {detail}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    ShapeMismatch {
        path: String,
        frame: Option<usize>,
        detail: String,
    },

    #[error("malformed channel file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

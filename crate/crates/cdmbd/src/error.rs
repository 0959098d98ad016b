use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CdmbdError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix entries must be finite: {0}")]
    NonFinite(String),

    #[error("unstable blanket dynamics: spectral radius {rho} >= 1, (I - A_bb) is numerically singular")]
    Unstable { rho: f64 },

    #[error("observation channel {0} out of range (expected 0..=6)")]
    ChannelOutOfRange(usize),

    #[error("blanket is empty; keep the previous blanket mean")]
    EmptyBlanket,

    #[error("partition has no assigned nodes")]
    EmptyPartition,

    #[error("edit would leave the blanket empty")]
    EmptyPostEditBlanket,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("certificate fixed point violated: lambda[{index}] = {lambda} is unsaturated but violation {violation} exceeds tolerance (non-convergence)")]
    CertificateFixedPoint {
        index: usize,
        lambda: f64,
        violation: f64,
    },

    #[error("gap score needs at least two distinct candidate partitions, got {0}")]
    TooFewCandidates(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CdmbdError>;

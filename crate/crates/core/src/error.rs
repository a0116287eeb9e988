use thiserror::Error;

/// Errors raised by the emulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QnodeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("cannot take a tensor product of a state and an operator")]
    MixedOperands,

    #[error("invalid subsystem selection: {0}")]
    InvalidSubsystems(String),

    #[error("Pauli string is proportional to the identity")]
    IdentityPauli,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("parameter vector has length {found}, model expects {expected}")]
    ThetaLength { expected: usize, found: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid adjoint seed: {0}")]
    InvalidSeed(String),

    #[error("time-dependent Hamiltonian is not supported here")]
    TimeDependent,

    #[error("projection weight {0:e} is too small to recover a state")]
    ProjectionVanishes(f64),

    #[error("density is not normalised on the grid (integral {0})")]
    Unnormalised(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, QnodeError>;

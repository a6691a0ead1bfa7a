use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{n} units cannot be split into {k} equal arms (remainder {remainder})")]
    UnequalArms {
        n: usize,
        k: usize,
        remainder: usize,
    },

    #[error("infeasible group formation: {0}")]
    InfeasibleComposition(String),

    #[error("missing salient column")]
    MissingSalient,

    #[error("covariance matrix is singular even after ridge regularization")]
    SingularCovariance,

    #[error("cannot accept {requested} allocations: only {finite} of {pool} have finite scores")]
    NotEnoughFinite {
        requested: usize,
        finite: usize,
        pool: usize,
    },

    #[error("design is not locked; pre-register it before drawing the official randomization")]
    NotLocked,

    #[error("design is already locked")]
    AlreadyLocked,

    #[error("observed allocation is not a member of the accepted set")]
    NotAccepted,

    #[error("bundle digest mismatch: manifest says {expected}, content hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("bundle: {0}")]
    Bundle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

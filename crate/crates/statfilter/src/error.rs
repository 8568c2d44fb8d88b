//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes:
//! configuration/schema problems (exit 2), numerical failures detected at
//! run time (exit 3), and I/O trouble (exit 4).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A configuration value failed validation before any work started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A structured input file did not match its schema. `detail` names the
    /// failing key path and line where the underlying parser provides them.
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Requested builtin system name does not exist.
    #[error("unknown builtin system `{0}` (expected one of ou1, cubic1, triad3, l96s)")]
    UnknownSystem(String),

    /// A state component left the finite range (NaN, infinity, or magnitude
    /// beyond the blow-up threshold).
    #[error("non-finite or blown-up state in {what} at step {step} (t = {t})")]
    NonFinite { what: String, step: usize, t: f64 },

    /// Explicit grid step violates the stability bound.
    #[error("time step {dt} violates stability bound (max stable step {dt_max})")]
    CflViolation { dt: f64, dt_max: f64 },

    /// A multiplicative density update would have produced negative mass.
    #[error("analysis step {dt} would drive the density negative (max stable step {dt_max})")]
    NegativeDensity { dt: f64, dt_max: f64 },

    /// Interpolation was queried outside the covered observation window.
    #[error("time {t} is outside the observation window [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },

    /// A truth path was too short to synthesize the requested observations.
    #[error("truth path covers t <= {have} but observations need t = {needed}")]
    InsufficientPath { needed: f64, have: f64 },

    /// The filter ran past the last observation knot.
    #[error("observations exhausted at t = {t}")]
    ObsExhausted { t: f64 },

    /// Histogram comparison with mismatched binning.
    #[error("histogram bin count mismatch: {np} vs {nq}")]
    BinMismatch { np: usize, nq: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Parse { path: "<csv>".to_string(), detail: format!("{kind:?}") },
        }
    }
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::UnknownSystem(_) | Error::BinMismatch { .. } => 2,
            Error::NonFinite { .. }
            | Error::CflViolation { .. }
            | Error::NegativeDensity { .. }
            | Error::OutOfRange { .. }
            | Error::InsufficientPath { .. }
            | Error::ObsExhausted { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}

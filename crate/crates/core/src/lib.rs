//! Secure multi-party valley-filling.
//!
//! Twenty EVs (or three, or a thousand) want to schedule their overnight
//! charging so that the neighbourhood's total load curve flattens out, without
//! any of them revealing its charging profile, demand, or charger rating to
//! the others. The optimizer is a projected-gradient / dual-ascent loop whose
//! only coupling between agents is the aggregate load `Σ xᵢ`; that aggregate
//! is computed with a manager-free threshold secret-sharing round instead of
//! a plaintext exchange.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`] — prime-field arithmetic and Lagrange interpolation at zero.
//! * [`encoding`] — fixed-point codec between signed kW values and field
//!   residues.
//! * [`shamir`] — polynomial dealing, share reconstruction, and consistency
//!   checking.
//! * [`optim`] — the valley-filling quadratic program and its primal/dual
//!   iteration, with the aggregate injected so it can come from anywhere.
//! * [`transport`] — message fabric: an in-process bus for deterministic
//!   simulation and a TCP mesh for multi-process runs, both supporting
//!   read-only adversary taps.
//! * [`protocol`] — the per-iteration secure aggregation round, the full
//!   multi-agent run, and the adversary reconstruction harness.
//! * [`scenario_io`] — baseline-load ingestion, synthetic profiles, fleet
//!   sampling, and CSV result emission.

pub mod encoding;
pub mod field;
pub mod optim;
pub mod protocol;
pub mod scenario_io;
pub mod shamir;
pub mod transport;

use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A rejected configuration (bad modulus, k/n mismatch, codec overflow...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input to an operation (duplicate nodes, length mismatch...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operands belong to different prime fields.
    #[error("field mismatch: operands have moduli {left} and {right}")]
    FieldMismatch { left: u64, right: u64 },

    /// Multiplicative inverse of zero requested.
    #[error("division by zero in prime field")]
    DivisionByZero,

    /// A value falls outside the range a codec was configured for.
    #[error("range error: {0}")]
    Range(String),

    /// Not enough shares to reconstruct a secret. This is the threshold
    /// property surfacing as an explicit error, not a defect.
    #[error("threshold not met: reconstruction needs {needed} shares, got {got}")]
    Threshold { needed: usize, got: usize },

    /// Received shares are inconsistent with a single polynomial.
    #[error("integrity failure in round {round}: {detail}")]
    Integrity { round: u32, detail: String },

    /// A synchronization point timed out; lists the agents that never arrived.
    #[error("round {round} aborted: missing agents {missing:?}")]
    RoundAbort { round: u32, missing: Vec<u16> },

    /// Socket or channel failure.
    #[error("transport error: {0}")]
    Transport(String),

    /// Malformed input file.
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

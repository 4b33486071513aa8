//! Receding-horizon stochastic optimal control for partially observed
//! dynamical systems, built on the ensemble Kalman--Bucy filter (EnKBF).
//!
//! The crate couples two ensemble computations:
//!
//! * a continuous-time ensemble Kalman--Bucy filter ([`filter`]) that tracks
//!   the state of a partially observed system from noisy observation
//!   increments, and
//! * an ensemble solver for the forward-backward SDE system of the stochastic
//!   maximum principle ([`fbsde`]), which regresses the costate onto the
//!   filter mean across simulated observation futures and returns an affine
//!   feedback law `u = -G^T (Lambda x_bar + lambda)` as a [`GainSchedule`].
//!
//! The [`mpc`] module runs the two in a receding-horizon loop against a
//! simulated "physical twin", while [`riccati`] provides the classical
//! linear-quadratic reference solutions (backward Riccati ODEs and
//! Kalman--Bucy moment ODEs) used to validate the ensemble solver in the
//! linear-Gaussian case. [`harness`] wires everything into reproducible,
//! seeded experiments with CSV output.

pub mod ensemble;
pub mod fbsde;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod riccati;
pub mod rng;

pub use ensemble::Ensemble;
pub use fbsde::{GainSchedule, PicardConfig, RealizationBundle};
pub use filter::FilterState;
pub use model::{InitialLaw, ModelSpec, QuadraticCost};
pub use mpc::{MpcConfig, TrajectoryLog};
pub use riccati::LtiSpec;
pub use rng::RngStreams;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the filtering, solver, and experiment layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("ensemble size {size} too small (need more than {min} members)")]
    EnsembleTooSmall { size: usize, min: usize },

    #[error("matrix not symmetric positive definite in {context} (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("singular system in {context} (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularMatrix {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("non-finite state produced at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("gain iteration diverged (non-finite gains at iteration {iteration})")]
    DivergedGains { iteration: usize },

    #[error("Riccati integration blew up at t = {t}")]
    RiccatiBlowUp { t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

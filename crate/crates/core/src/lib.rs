//! Energy-efficiency maximization for cell-free downlink networks assisted by
//! hybrid RISs (reconfigurable intelligent surfaces mixing passive and
//! amplifying elements).
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: system configuration, node placement, active-element mask.
//! - [`channel`]: Rician link synthesis and the stacked channel matrices.
//! - [`metrics`]: SINR, rates, power model, energy efficiency, feasibility.
//! - [`transforms`]: Dinkelbach / Lagrangian-dual / quadratic-transform
//!   objectives, their closed-form slack updates and the quadratic forms used
//!   by the RIS subproblem.
//! - [`solver`]: a dependency-free convex QCQP solver and the two
//!   block subproblems (beamforming and RIS coefficients).
//! - [`driver`]: the outer block-coordinate ascent loop and baseline modes.
//! - [`experiments`]: Monte-Carlo sweeps, convergence traces and CSV output.

pub mod channel;
pub mod driver;
pub mod experiments;
pub mod metrics;
pub mod operator;
pub mod scenario;
pub mod solver;
pub mod transforms;

pub use num_complex::Complex64;

/// Complex column vector used throughout the crate.
pub type CVector = nalgebra::DVector<Complex64>;
/// Complex dense matrix used throughout the crate.
pub type CMatrix = nalgebra::DMatrix<Complex64>;

/// RNG used for every stochastic component; seeded explicitly everywhere.
pub type RandomSource = rand_chacha::ChaCha8Rng;

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts watts to dBm.
pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Converts a dB ratio to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts a linear ratio to dB.
pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

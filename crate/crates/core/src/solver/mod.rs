//! Convex subproblems of the alternating optimization and the QCQP solver
//! behind them.

mod beamforming;
mod qcqp;
mod ris;

pub use beamforming::{beamforming_qcqp, sinr_constraints_w, sinr_floor_constraints_w, sinr_gap_w, solve_beamforming, solve_beamforming_with_floors};
pub use qcqp::{
    solve_qcqp, ConvexQcqp, NormBound, QuadConstraint, SolveResult, SolveStatus, SolverError, SolverIterate,
    SolverSettings, PSD_TOLERANCE,
};
pub use ris::{ris_qcqp, sinr_constraints_theta, sinr_floor_constraints_theta, sinr_gap_theta, solve_ris, solve_ris_with_floors};

use thiserror::Error;

use crate::scenario::SystemConfig;

#[derive(Debug, Error)]
pub enum SubproblemError {
    #[error(transparent)]
    Build(#[from] SolverError),
    #[error("subproblem infeasible (scaled violation {0:e})")]
    Infeasible(f64),
}

/// Knobs shared by the beamforming and RIS block updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    /// Include the linearized rate constraints.
    pub rate_constraints: bool,
    pub settings: SolverSettings,
}

impl BlockOptions {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            rate_constraints: true,
            settings: SolverSettings {
                tol_feas: cfg.tol_feas,
                tol_kkt: cfg.tol_kkt,
                max_iters: cfg.solver_max_iters,
                record_history: false,
            },
        }
    }
}

fn finish(result: SolveResult) -> Result<SolveResult, SubproblemError> {
    if result.status == SolveStatus::Infeasible {
        Err(SubproblemError::Infeasible(result.feasibility))
    } else {
        Ok(result)
    }
}

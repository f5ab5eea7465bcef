//! Beamforming block: the quadratic-transform objective in `x = vec(W)`.

use crate::channel::{effective_channels, ChannelSet};
use crate::metrics::{circuit_power, ris_noise_power, Beamformer, RisState, UserTerms};
use crate::operator::{HermitianOp, OpTerm};
use crate::scenario::SystemConfig;
use crate::transforms::{kron_power_operators, SlackState};
use crate::{CMatrix, CVector, Complex64};

use super::{finish, solve_qcqp, BlockOptions, ConvexQcqp, NormBound, QuadConstraint, SolveResult, SolverError, SubproblemError};

fn channel_columns(ch: &ChannelSet, ris: &RisState) -> Vec<CVector> {
    effective_channels(ch, ris).into_iter().map(|r| r.map(|z| z.conj())).collect()
}

/// Rate constraints linearized at `bf_prev`, one per user:
/// `gamma (sum_{j!=k} |h_k^H w_j|^2 + noise) - (2 Re(s^* h_k^H w_k) - |s|^2) <= 0`
/// with `s = h_k^H w_k^prev`.
pub fn sinr_constraints_w(ch: &ChannelSet, ris: &RisState, bf_prev: &Beamformer, cfg: &SystemConfig) -> Vec<QuadConstraint> {
    sinr_floor_constraints_w(ch, ris, bf_prev, cfg, &vec![cfg.sinr_threshold(); ch.num_users])
}

/// Same linearization with a separate SINR floor per user.
pub fn sinr_floor_constraints_w(
    ch: &ChannelSet,
    ris: &RisState,
    bf_prev: &Beamformer,
    cfg: &SystemConfig,
    floors: &[f64],
) -> Vec<QuadConstraint> {
    let m = ch.total_antennas();
    let kc = ch.num_users;
    let hs = channel_columns(ch, ris);
    (0..kc)
        .map(|k| {
            let gamma = floors[k];
            let h = &hs[k];
            let s = h.dotc(&bf_prev.w.column(k));
            let block = h * h.adjoint() * Complex64::new(gamma, 0.0);
            let active = (0..kc).map(|j| j != k).collect();
            let op = HermitianOp::from_term(m * kc, OpTerm::Repeated { block, active });
            let mut q = CVector::zeros(m * kc);
            q.rows_mut(k * m, m).copy_from(&(h * (-s)));
            let noise = ris_noise_power(ch, ris, k, cfg) + cfg.noise_user;
            QuadConstraint::new(op, q, gamma * noise + s.norm_sqr())
        })
        .collect()
}

/// Exact rate-constraint gap `gamma (interference + noise) - signal` of user `k`.
pub fn sinr_gap_w(ch: &ChannelSet, ris: &RisState, bf: &Beamformer, k: usize, cfg: &SystemConfig) -> f64 {
    let t = UserTerms::compute(ch, bf, ris, cfg);
    cfg.sinr_threshold() * (t.interference(k) + t.noise(k)) - t.signal(k)
}

/// The beamforming QCQP in natural-log units (`ln 2` times the bit-valued
/// objective).
pub fn beamforming_qcqp(
    ch: &ChannelSet,
    ris: &RisState,
    slack: &SlackState,
    bf_prev: &Beamformer,
    cfg: &SystemConfig,
    rate_constraints: bool,
) -> Result<ConvexQcqp, SolverError> {
    let m = ch.total_antennas();
    let kc = ch.num_users;
    let dim = m * kc;
    let nt = ch.antennas_per_ap;
    let y = slack.y_nat();
    let hs = channel_columns(ch, ris);

    let mut block = CMatrix::identity(m, m) * Complex64::new(y / cfg.eff_ap, 0.0);
    for (k, h) in hs.iter().enumerate() {
        block += h * h.adjoint() * Complex64::new(slack.rho_hat[k].norm_sqr(), 0.0);
    }
    let mut curvature = HermitianOp::from_term(
        dim,
        OpTerm::Repeated {
            block,
            active: vec![true; kc],
        },
    );
    let power = kron_power_operators(ch, ris, cfg);
    let mut ris_noise_total = 0.0;
    for (op, offset) in &power.ris {
        curvature = curvature.add(op.scaled(y));
        ris_noise_total += offset;
    }

    let mut linear = CVector::zeros(dim);
    let mut constant = 0.0;
    for k in 0..kc {
        let rho = slack.rho_hat[k];
        let coef = rho * (1.0 + slack.eps_hat[k]).sqrt();
        linear.rows_mut(k * m, m).copy_from(&(&hs[k] * coef));
        constant -= rho.norm_sqr() * (ris_noise_power(ch, ris, k, cfg) + cfg.noise_user);
    }
    constant -= y * (ris_noise_total + circuit_power(ch.num_aps, kc, &ris.mask, cfg));

    let mut p = ConvexQcqp::new(constant, linear, curvature)?;
    let radius = (cfg.eff_ap * cfg.p_max_ap).sqrt();
    for l in 0..ch.num_aps {
        let indices = (0..kc).flat_map(|j| (l * nt..(l + 1) * nt).map(move |i| j * m + i)).collect();
        p.add_bound(NormBound { indices, radius })?;
    }
    for (op, offset) in power.ris {
        if !op.is_zero() {
            p.add_constraint(QuadConstraint::new(op, CVector::zeros(dim), offset - cfg.p_max_ris))?;
        }
    }
    if rate_constraints && cfg.sinr_threshold() > 0.0 {
        for c in sinr_constraints_w(ch, ris, bf_prev, cfg) {
            p.add_constraint(c)?;
        }
    }
    Ok(p)
}

/// Maximizes the quadratic-transform objective over `W` with `Theta` and the
/// slack variables fixed, starting from (and linearizing at) `bf_prev`.
pub fn solve_beamforming(
    ch: &ChannelSet,
    ris: &RisState,
    slack: &SlackState,
    bf_prev: &Beamformer,
    cfg: &SystemConfig,
    opts: &BlockOptions,
) -> Result<(Beamformer, SolveResult), SubproblemError> {
    let p = beamforming_qcqp(ch, ris, slack, bf_prev, cfg, opts.rate_constraints)?;
    solve_built(p, bf_prev, ch, opts)
}

/// Like [`solve_beamforming`], with the rate constraints replaced by
/// per-user SINR floors.
pub fn solve_beamforming_with_floors(
    ch: &ChannelSet,
    ris: &RisState,
    slack: &SlackState,
    bf_prev: &Beamformer,
    cfg: &SystemConfig,
    opts: &BlockOptions,
    floors: &[f64],
) -> Result<(Beamformer, SolveResult), SubproblemError> {
    let mut p = beamforming_qcqp(ch, ris, slack, bf_prev, cfg, false)?;
    for c in sinr_floor_constraints_w(ch, ris, bf_prev, cfg, floors) {
        p.add_constraint(c)?;
    }
    solve_built(p, bf_prev, ch, opts)
}

fn solve_built(
    p: ConvexQcqp,
    bf_prev: &Beamformer,
    ch: &ChannelSet,
    opts: &BlockOptions,
) -> Result<(Beamformer, SolveResult), SubproblemError> {
    let result = solve_qcqp(&p, &bf_prev.vec(), &opts.settings);
    log::debug!(
        "beamforming: {:?} after {} iterations, feasibility {:.2e}, kkt {:.2e}",
        result.status,
        result.iterations,
        result.feasibility,
        result.stationarity
    );
    let result = finish(result)?;
    let bf = Beamformer::from_vec(&result.x, ch.antennas_per_ap, ch.num_users);
    Ok((bf, result))
}

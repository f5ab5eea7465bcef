//! RIS block: the quadratic-transform objective in `theta = conj(a)`.

use nalgebra::DVector;

use crate::channel::ChannelSet;
use crate::metrics::{Beamformer, RisState};
use crate::operator::{HermitianOp, OpTerm};
use crate::scenario::SystemConfig;
use crate::transforms::{build_quadratic_forms, theta_free_power, QuadraticForms, SlackState};
use crate::{CVector, Complex64};

use super::{finish, solve_qcqp, BlockOptions, ConvexQcqp, QuadConstraint, SolveResult, SolverError, SubproblemError};

/// Rate constraints linearized at `theta_prev`. With `u = d_kk + theta^H v_kk`:
/// `gamma (sum_{j!=k} |h_k^H w_j|^2 + noise) - (2 Re(u_prev^* u) - |u_prev|^2) <= 0`.
pub fn sinr_constraints_theta(forms: &QuadraticForms, theta_prev: &CVector, cfg: &SystemConfig) -> Vec<QuadConstraint> {
    sinr_floor_constraints_theta(forms, theta_prev, cfg, &vec![cfg.sinr_threshold(); forms.num_users()])
}

/// Same linearization with a separate SINR floor per user.
pub fn sinr_floor_constraints_theta(
    forms: &QuadraticForms,
    theta_prev: &CVector,
    cfg: &SystemConfig,
    floors: &[f64],
) -> Vec<QuadConstraint> {
    let n = forms.dim();
    let kc = forms.num_users();
    let users = forms.direct_gain.ncols();
    (0..kc)
        .map(|k| {
            let gamma = floors[k];
            let mut op = HermitianOp::zero(n);
            let others: Vec<_> = (0..users)
                .filter(|&j| j != k)
                .map(|j| (gamma, forms.cascade[k][j].clone()))
                .collect();
            if !others.is_empty() {
                op.push(OpTerm::LowRank(others));
            }
            op.push(OpTerm::Diagonal(&forms.noise_diag[k] * gamma));
            let d = forms.direct_gain[(k, k)];
            let v = &forms.cascade[k][k];
            let u_prev = d + theta_prev.dotc(v);
            let mut q = -(v * u_prev.conj());
            let mut r = gamma * cfg.noise_user - 2.0 * (u_prev.conj() * d).re + u_prev.norm_sqr();
            for j in (0..users).filter(|&j| j != k) {
                q += forms.q2(k, j) * Complex64::new(gamma, 0.0);
                r += gamma * forms.q3(k, j);
            }
            QuadConstraint::new(op, q, r)
        })
        .collect()
}

/// Exact rate-constraint gap of user `k` as a function of `theta`.
pub fn sinr_gap_theta(forms: &QuadraticForms, theta: &CVector, k: usize, cfg: &SystemConfig) -> f64 {
    let interference: f64 = (0..forms.direct_gain.ncols())
        .filter(|&j| j != k)
        .map(|j| forms.gain_quad(k, j, theta))
        .sum();
    cfg.sinr_threshold() * (interference + forms.noise_quad(k, theta) + cfg.noise_user) - forms.gain_quad(k, k, theta)
}

/// The RIS QCQP in natural-log units.
pub fn ris_qcqp(
    ch: &ChannelSet,
    bf: &Beamformer,
    slack: &SlackState,
    ris_prev: &RisState,
    cfg: &SystemConfig,
    floors: Option<&[f64]>,
) -> Result<ConvexQcqp, SolverError> {
    let mask = &ris_prev.mask;
    let forms = build_quadratic_forms(ch, bf, mask, cfg);
    let n = forms.dim();
    let kc = forms.num_users();
    let users = forms.direct_gain.ncols();
    let y = slack.y_nat();

    let mut lowrank = Vec::with_capacity(kc * users);
    let mut diag = DVector::from_fn(n, |e, _| {
        if mask.is_active(e) {
            y / cfg.eff_ris * (forms.h_diag[e] + cfg.noise_ris)
        } else {
            0.0
        }
    });
    let mut linear = CVector::zeros(n);
    let mut constant = -y * theta_free_power(ch, bf, mask, cfg);
    for k in 0..kc {
        let rho = slack.rho_hat[k];
        let w2 = rho.norm_sqr();
        let root = (1.0 + slack.eps_hat[k]).sqrt();
        diag += &forms.noise_diag[k] * w2;
        linear += &forms.cascade[k][k] * (rho.conj() * root);
        constant += 2.0 * root * (rho.conj() * forms.direct_gain[(k, k)]).re - w2 * cfg.noise_user;
        for j in 0..users {
            lowrank.push((w2, forms.cascade[k][j].clone()));
            linear -= forms.q2(k, j) * Complex64::new(w2, 0.0);
            constant -= w2 * forms.q3(k, j);
        }
    }
    let mut curvature = HermitianOp::from_term(n, OpTerm::Diagonal(diag));
    curvature.push(OpTerm::LowRank(lowrank));

    let mut p = ConvexQcqp::new(constant, linear, curvature)?;
    let upper: Vec<f64> = (0..n).map(|e| ris_prev.amplitude_bound(e, cfg.a_max)).collect();
    p.add_magnitude_bounds(&upper)?;
    for r in 0..mask.num_ris() {
        if mask.active_count_in(r) == 0 {
            continue;
        }
        let mut d = DVector::zeros(n);
        for e in mask.active_in(r) {
            d[e] = (forms.h_diag[e] + cfg.noise_ris) / cfg.eff_ris;
        }
        p.add_constraint(QuadConstraint::new(
            HermitianOp::from_term(n, OpTerm::Diagonal(d)),
            CVector::zeros(n),
            -cfg.p_max_ris,
        ))?;
    }
    if let Some(floors) = floors {
        for c in sinr_floor_constraints_theta(&forms, &ris_prev.theta(), cfg, floors) {
            p.add_constraint(c)?;
        }
    }
    Ok(p)
}

/// Maximizes the quadratic-transform objective over the RIS coefficients with
/// `W` and the slack variables fixed, starting from `ris_prev`.
pub fn solve_ris(
    ch: &ChannelSet,
    bf: &Beamformer,
    slack: &SlackState,
    ris_prev: &RisState,
    cfg: &SystemConfig,
    opts: &BlockOptions,
) -> Result<(RisState, SolveResult), SubproblemError> {
    let floors = vec![cfg.sinr_threshold(); ch.num_users];
    let floors = (opts.rate_constraints && cfg.sinr_threshold() > 0.0).then_some(floors.as_slice());
    solve_ris_with_floors(ch, bf, slack, ris_prev, cfg, opts, floors)
}

/// Like [`solve_ris`], with the rate constraints replaced by per-user SINR
/// floors (none if `floors` is `None`).
pub fn solve_ris_with_floors(
    ch: &ChannelSet,
    bf: &Beamformer,
    slack: &SlackState,
    ris_prev: &RisState,
    cfg: &SystemConfig,
    opts: &BlockOptions,
    floors: Option<&[f64]>,
) -> Result<(RisState, SolveResult), SubproblemError> {
    let p = ris_qcqp(ch, bf, slack, ris_prev, cfg, floors)?;
    let result = solve_qcqp(&p, &ris_prev.theta(), &opts.settings);
    log::debug!(
        "ris: {:?} after {} iterations, feasibility {:.2e}, kkt {:.2e}",
        result.status,
        result.iterations,
        result.feasibility,
        result.stationarity
    );
    let result = finish(result)?;
    let ris = RisState::from_theta(&result.x, ris_prev.mask.clone());
    Ok((ris, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::synthesize_channels_from_seed;
    use crate::metrics::active_amplitudes;
    use crate::scenario::{build_selection_mask, place_nodes};
    use crate::transforms::eval_f4;
    use crate::CMatrix;
    use rand::SeedableRng;
    use std::f64::consts::LN_2;

    fn instance(seed: u64, cfg: &SystemConfig) -> (ChannelSet, RisState, Beamformer) {
        let mut rng = crate::RandomSource::seed_from_u64(seed);
        let g = place_nodes(cfg, &mut rng);
        let ch = synthesize_channels_from_seed(cfg, &g, seed);
        let mask = build_selection_mask(cfg);
        let coeffs = CVector::from_fn(mask.len(), |n, _| Complex64::from_polar(if mask.is_active(n) { 2.0 } else { 1.0 }, 0.3 * n as f64));
        let w = CMatrix::from_fn(cfg.total_antennas(), cfg.num_users, |i, j| Complex64::new(1e-2 * (i + 1) as f64, 1e-2 * j as f64));
        (ch, RisState::new(coeffs, mask), Beamformer::new(w, cfg.antennas_per_ap))
    }

    #[test]
    fn qcqp_objective_is_f4() {
        let cfg = SystemConfig::ci();
        let (ch, ris, bf) = instance(2, &cfg);
        let slack = SlackState::updated(&ch, &bf, &ris, &cfg);
        let floors = vec![cfg.sinr_threshold(); cfg.num_users];
        let p = ris_qcqp(&ch, &bf, &slack, &ris, &cfg, Some(&floors)).unwrap();
        let theta = ris.theta().map(|z| z * Complex64::new(0.5, -0.2));
        for t in [ris.theta(), theta] {
            let f4 = eval_f4(&ch, &t, &ris.mask, &bf, &slack, &cfg);
            let obj = p.objective(&t) / LN_2;
            assert!((obj - f4).abs() <= 1e-10 * f4.abs().max(1.0), "{obj} vs {f4}");
        }
    }

    #[test]
    fn large_multiplier_shrinks_active_amplitudes() {
        let mut cfg = SystemConfig::ci();
        cfg.rate_threshold = 0.0;
        let (ch, ris, bf) = instance(4, &cfg);
        let opts = BlockOptions::from_config(&cfg);
        let mut last = f64::INFINITY;
        let mut first = None;
        for y in [1e2, 1e4, 1e6, 1e8] {
            let mut slack = SlackState::updated(&ch, &bf, &ris, &cfg);
            slack.y_hat = y;
            let (next, _) = solve_ris(&ch, &bf, &slack, &ris, &cfg, &opts).unwrap();
            let energy = active_amplitudes(&next).norm_squared();
            first.get_or_insert(energy);
            assert!(energy <= last + 1e-9, "{energy} > {last}");
            last = energy;
        }
        assert!(last < 1e-3 * first.unwrap(), "{last}");
    }
}

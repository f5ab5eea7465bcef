//! Fractional-programming reformulations of the energy-efficiency objective.
//!
//! Three nested transforms turn `sum_k log2(1 + SINR_k) / P_tot` into a
//! function that is concave in each of `W` and `theta` separately:
//!
//! - Dinkelbach: `f1 = sum_k log2(1 + SINR_k) - y * P_tot`;
//! - Lagrangian dual: `f2` with slack `eps` (optimum `eps_k = SINR_k`);
//! - quadratic transform: `f3` with slack `rho` (closed-form optimum).
//!
//! `f2` and `f3` are derived in natural log, so the closed-form slack updates
//! are exact stationary points there. Reported values are scaled by `1/ln 2`
//! so that every `f` shares the units of `f1` (bits/s/Hz minus `y` watts), and
//! `f2(eps = SINR) == f1` exactly.

use std::f64::consts::LN_2;

use nalgebra::DVector;

use crate::channel::ChannelSet;
use crate::metrics::{total_power, Beamformer, RisState, UserTerms};
use crate::operator::{HermitianOp, OpTerm};
use crate::scenario::{SelectionMask, SystemConfig};
use crate::{CMatrix, CVector, Complex64};

/// Slack variables of the three transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackState {
    /// Dinkelbach multiplier, bits/Joule/Hz.
    pub y_hat: f64,
    /// Lagrangian-dual slack, one per user.
    pub eps_hat: Vec<f64>,
    /// Quadratic-transform slack, one per user.
    pub rho_hat: Vec<Complex64>,
}

impl SlackState {
    pub fn zeros(num_users: usize) -> Self {
        Self {
            y_hat: 0.0,
            eps_hat: vec![0.0; num_users],
            rho_hat: vec![Complex64::new(0.0, 0.0); num_users],
        }
    }

    /// The multiplier expressed per nat, i.e. in the units of the
    /// natural-log objectives.
    pub fn y_nat(&self) -> f64 {
        self.y_hat * LN_2
    }

    /// Applies all three closed-form updates in order at `(W, Theta)`.
    pub fn updated(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> Self {
        let terms = UserTerms::compute(ch, bf, ris, cfg);
        let y_hat = update_y_from(&terms, ch, bf, ris, cfg);
        let eps_hat = terms.sinrs();
        let rho_hat = rho_from(&terms, &eps_hat);
        Self {
            y_hat,
            eps_hat,
            rho_hat,
        }
    }
}

fn update_y_from(terms: &UserTerms, ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> f64 {
    terms.rates().iter().sum::<f64>() / total_power(ch, bf, ris, cfg).total
}

fn rho_from(terms: &UserTerms, eps_hat: &[f64]) -> Vec<Complex64> {
    (0..terms.num_users())
        .map(|k| terms.gains[(k, k)] * ((1.0 + eps_hat[k]).sqrt() / terms.total_received(k)))
        .collect()
}

/// Dinkelbach update: the current energy efficiency.
pub fn update_y(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> f64 {
    update_y_from(&UserTerms::compute(ch, bf, ris, cfg), ch, bf, ris, cfg)
}

/// Lagrangian-dual update: `eps_k = SINR_k`.
pub fn update_epsilon(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> Vec<f64> {
    UserTerms::compute(ch, bf, ris, cfg).sinrs()
}

/// Quadratic-transform update
/// `rho_k = sqrt(1 + eps_k) h_k^H w_k / (sum_j |h_k^H w_j|^2 + noise_k)`.
pub fn update_rho(
    ch: &ChannelSet,
    bf: &Beamformer,
    ris: &RisState,
    eps_hat: &[f64],
    cfg: &SystemConfig,
) -> Vec<Complex64> {
    rho_from(&UserTerms::compute(ch, bf, ris, cfg), eps_hat)
}

pub fn eval_f1(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, y_hat: f64, cfg: &SystemConfig) -> f64 {
    let rates: f64 = UserTerms::compute(ch, bf, ris, cfg).rates().iter().sum();
    rates - y_hat * total_power(ch, bf, ris, cfg).total
}

/// Lagrangian-dual objective including the Dinkelbach power term.
pub fn eval_f2(
    ch: &ChannelSet,
    bf: &Beamformer,
    ris: &RisState,
    y_hat: f64,
    eps_hat: &[f64],
    cfg: &SystemConfig,
) -> f64 {
    let terms = UserTerms::compute(ch, bf, ris, cfg);
    let nat: f64 = (0..terms.num_users())
        .map(|k| {
            let g = terms.sinr(k);
            let e = eps_hat[k];
            (1.0 + e).ln() - e + (1.0 + e) * g / (1.0 + g)
        })
        .sum();
    nat / LN_2 - y_hat * total_power(ch, bf, ris, cfg).total
}

/// `sum_k [ln(1 + eps_k) - eps_k] / ln 2`: the part of `f2` that `f3` omits.
pub fn f2_constant(eps_hat: &[f64]) -> f64 {
    eps_hat.iter().map(|e| (1.0 + e).ln() - e).sum::<f64>() / LN_2
}

/// Sum over users of the quadratic-transform terms, natural-log units.
pub fn quadratic_transform_terms(terms: &UserTerms, slack: &SlackState) -> f64 {
    (0..terms.num_users())
        .map(|k| {
            let rho = slack.rho_hat[k];
            2.0 * (1.0 + slack.eps_hat[k]).sqrt() * (rho.conj() * terms.gains[(k, k)]).re
                - rho.norm_sqr() * terms.total_received(k)
        })
        .sum()
}

/// Quadratic-transform objective `f3` in the units of `f1`.
pub fn eval_f3(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, slack: &SlackState, cfg: &SystemConfig) -> f64 {
    let terms = UserTerms::compute(ch, bf, ris, cfg);
    quadratic_transform_terms(&terms, slack) / LN_2 - slack.y_hat * total_power(ch, bf, ris, cfg).total
}

/// Quadratic forms of every received amplitude in the RIS coefficient
/// vector `theta`, for a fixed beamformer.
///
/// With `v_kj = diag(f_k^H) G w_j` and `c_kj = d_k^H w_j`:
/// `Q1 = v v^H`, `Q2 = v conj(c)`, `Q3 = |c|^2`, so
/// `|h_k^H w_j|^2 = theta^H Q1 theta + 2 Re(theta^H Q2) + Q3`.
#[derive(Debug, Clone)]
pub struct QuadraticForms {
    /// `v[k][j]`.
    pub cascade: Vec<Vec<CVector>>,
    /// `(k, j)` entry is `d_k^H w_j`.
    pub direct_gain: CMatrix,
    /// Diagonal of `G W W^H G^H` over all elements (stacked `H_r`).
    pub h_diag: DVector<f64>,
    /// Per user: `sigma_r^2 |f_{k,n}|^2` on active elements, 0 elsewhere.
    pub noise_diag: Vec<DVector<f64>>,
    pub mask: SelectionMask,
}

impl QuadraticForms {
    pub fn num_users(&self) -> usize {
        self.direct_gain.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h_diag.len()
    }

    pub fn q1(&self, k: usize, j: usize) -> CMatrix {
        let v = &self.cascade[k][j];
        v * v.adjoint()
    }

    pub fn q2(&self, k: usize, j: usize) -> CVector {
        &self.cascade[k][j] * self.direct_gain[(k, j)].conj()
    }

    pub fn q3(&self, k: usize, j: usize) -> f64 {
        self.direct_gain[(k, j)].norm_sqr()
    }

    /// `theta^H Q1 theta + 2 Re(theta^H Q2) + Q3` without forming `Q1`.
    pub fn gain_quad(&self, k: usize, j: usize, theta: &CVector) -> f64 {
        (theta.dotc(&self.cascade[k][j]) + self.direct_gain[(k, j)]).norm_sqr()
    }

    /// `H_r` as the diagonal restricted to RIS `r`.
    pub fn h_r(&self, r: usize) -> DVector<f64> {
        self.h_diag.rows(r * self.mask.elements_per_ris, self.mask.elements_per_ris).clone_owned()
    }

    /// Noise quadratic of RIS `r` for user `k` (diagonal over RIS `r`).
    pub fn noise_rk(&self, r: usize, k: usize) -> DVector<f64> {
        self.noise_diag[k].rows(r * self.mask.elements_per_ris, self.mask.elements_per_ris).clone_owned()
    }

    /// Amplified RIS noise at user `k`: `sum_r sigma'^2_{r,k}`.
    pub fn noise_quad(&self, k: usize, theta: &CVector) -> f64 {
        self.noise_diag[k].iter().zip(theta.iter()).map(|(d, t)| d * t.norm_sqr()).sum()
    }

    /// Transmit power of the active elements of RIS `r` for coefficients `theta`.
    pub fn ris_power(&self, r: usize, theta: &CVector, cfg: &SystemConfig) -> f64 {
        self.mask
            .active_in(r)
            .map(|n| theta[n].norm_sqr() * (self.h_diag[n] + cfg.noise_ris))
            .sum::<f64>()
            / cfg.eff_ris
    }
}

pub fn build_quadratic_forms(
    ch: &ChannelSet,
    bf: &Beamformer,
    mask: &SelectionMask,
    cfg: &SystemConfig,
) -> QuadraticForms {
    let n = ch.total_elements();
    let k_count = ch.num_users;
    let gw = &ch.ap_ris * &bf.w;
    let direct_gain = &ch.direct * &bf.w;
    let cascade = (0..k_count)
        .map(|k| {
            (0..bf.num_users())
                .map(|j| CVector::from_fn(n, |e, _| ch.ris_user[(k, e)] * gw[(e, j)]))
                .collect()
        })
        .collect();
    let h_diag = DVector::from_fn(n, |e, _| gw.row(e).norm_squared());
    let noise_diag = (0..k_count)
        .map(|k| {
            DVector::from_fn(n, |e, _| {
                if mask.is_active(e) {
                    cfg.noise_ris * ch.ris_user[(k, e)].norm_sqr()
                } else {
                    0.0
                }
            })
        })
        .collect();
    QuadraticForms {
        cascade,
        direct_gain,
        h_diag,
        noise_diag,
        mask: mask.clone(),
    }
}

/// Power constraints as quadratic operators on `vec(W)`.
#[derive(Debug, Clone)]
pub struct PowerOperators {
    /// Per AP: `P_l = vec(W)^H A_l vec(W)`.
    pub ap: Vec<HermitianOp>,
    /// Per RIS: `P_r = vec(W)^H B_r vec(W) + offset_r`, with
    /// `B_r = I_K (x) G_r^H Psi_r^H Psi_r G_r / mu_R`.
    pub ris: Vec<(HermitianOp, f64)>,
}

impl PowerOperators {
    pub fn ap_power(&self, l: usize, x: &CVector) -> f64 {
        self.ap[l].quad(x)
    }

    pub fn ris_power(&self, r: usize, x: &CVector) -> f64 {
        let (op, offset) = &self.ris[r];
        op.quad(x) + offset
    }
}

pub fn kron_power_operators(ch: &ChannelSet, ris: &RisState, cfg: &SystemConfig) -> PowerOperators {
    let m = ch.total_antennas();
    let k_count = ch.num_users;
    let dim = m * k_count;
    let nt = ch.antennas_per_ap;
    let ap = (0..ch.num_aps)
        .map(|l| {
            let d = DVector::from_fn(dim, |i, _| {
                let row = i % m;
                if row / nt == l {
                    1.0 / cfg.eff_ap
                } else {
                    0.0
                }
            });
            HermitianOp::from_term(dim, OpTerm::Diagonal(d))
        })
        .collect();
    let ris_ops = (0..ris.mask.num_ris())
        .map(|r| {
            let mut block = CMatrix::zeros(m, m);
            let mut amp_sum = 0.0;
            for n in ris.mask.active_in(r) {
                let a2 = ris.coeffs[n].norm_sqr();
                amp_sum += a2;
                let row = ch.ap_ris.row(n);
                block += row.adjoint() * row * Complex64::new(a2 / cfg.eff_ris, 0.0);
            }
            let mut op = HermitianOp::zero(dim);
            if amp_sum > 0.0 {
                op.push(OpTerm::Repeated {
                    block,
                    active: vec![true; k_count],
                });
            }
            (op, cfg.noise_ris * amp_sum / cfg.eff_ris)
        })
        .collect();
    PowerOperators { ap, ris: ris_ops }
}

/// `f4`: the quadratic-transform objective written in `theta` for a fixed
/// beamformer, in the units of `f1`.
pub fn eval_f4_with_forms(
    forms: &QuadraticForms,
    theta: &CVector,
    slack: &SlackState,
    fixed_power: f64,
    cfg: &SystemConfig,
) -> f64 {
    let mut nat = 0.0;
    for k in 0..forms.num_users() {
        let rho = slack.rho_hat[k];
        let amp = forms.direct_gain[(k, k)] + theta.dotc(&forms.cascade[k][k]);
        nat += 2.0 * (1.0 + slack.eps_hat[k]).sqrt() * (rho.conj() * amp).re;
        let received: f64 = (0..forms.direct_gain.ncols())
            .map(|j| forms.gain_quad(k, j, theta))
            .sum::<f64>()
            + forms.noise_quad(k, theta)
            + cfg.noise_user;
        nat -= rho.norm_sqr() * received;
    }
    let ris_power: f64 = (0..forms.mask.num_ris()).map(|r| forms.ris_power(r, theta, cfg)).sum();
    nat / LN_2 - slack.y_hat * (ris_power + fixed_power)
}

/// AP transmit power plus circuit power: the part of `P_tot` that does not
/// depend on `theta`.
pub fn theta_free_power(ch: &ChannelSet, bf: &Beamformer, mask: &SelectionMask, cfg: &SystemConfig) -> f64 {
    let zero = RisState::zeros(mask.clone());
    let p = total_power(ch, bf, &zero, cfg);
    p.ap_total() + p.circuit
}

pub fn eval_f4(
    ch: &ChannelSet,
    theta: &CVector,
    mask: &SelectionMask,
    bf_prev: &Beamformer,
    slack: &SlackState,
    cfg: &SystemConfig,
) -> f64 {
    let forms = build_quadratic_forms(ch, bf_prev, mask, cfg);
    eval_f4_with_forms(&forms, theta, slack, theta_free_power(ch, bf_prev, mask, cfg), cfg)
}

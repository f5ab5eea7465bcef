//! Physical-layer quantities: SINR, rates, power consumption, energy
//! efficiency and the constraint violations of the EE maximization problem.

use nalgebra::DVector;

use crate::channel::{effective_channels, ChannelSet};
use crate::scenario::{SelectionMask, SystemConfig};
use crate::{CMatrix, CVector, Complex64};

/// Digital transmit beamformer `W` (`L N_t x K`), AP-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    pub w: CMatrix,
    pub antennas_per_ap: usize,
}

impl Beamformer {
    pub fn new(w: CMatrix, antennas_per_ap: usize) -> Self {
        assert_eq!(w.nrows() % antennas_per_ap, 0, "rows must be a multiple of N_t");
        Self { w, antennas_per_ap }
    }

    pub fn zeros(num_aps: usize, antennas_per_ap: usize, num_users: usize) -> Self {
        Self::new(CMatrix::zeros(num_aps * antennas_per_ap, num_users), antennas_per_ap)
    }

    pub fn num_aps(&self) -> usize {
        self.w.nrows() / self.antennas_per_ap
    }

    pub fn num_users(&self) -> usize {
        self.w.ncols()
    }

    /// Rows of AP `l` (`W_l`, `N_t x K`).
    pub fn ap_block(&self, l: usize) -> nalgebra::DMatrixView<'_, Complex64> {
        self.w.rows(l * self.antennas_per_ap, self.antennas_per_ap)
    }

    /// Column-stacked `vec(W)`.
    pub fn vec(&self) -> CVector {
        CVector::from_column_slice(self.w.as_slice())
    }

    pub fn from_vec(x: &CVector, antennas_per_ap: usize, num_users: usize) -> Self {
        let rows = x.len() / num_users.max(1);
        Self::new(CMatrix::from_column_slice(rows, num_users, x.as_slice()), antennas_per_ap)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// RIS coefficients `a_n` of all elements plus the active-element mask.
///
/// The coefficient vector used by the RIS subproblem is the elementwise
/// conjugate `theta = conj(a)`; [`RisState::theta`] and
/// [`RisState::from_theta`] are the only conversions.
#[derive(Debug, Clone, PartialEq)]
pub struct RisState {
    pub coeffs: CVector,
    pub mask: SelectionMask,
}

impl RisState {
    pub fn new(coeffs: CVector, mask: SelectionMask) -> Self {
        assert_eq!(coeffs.len(), mask.len(), "coefficient/mask length mismatch");
        Self { coeffs, mask }
    }

    pub fn zeros(mask: SelectionMask) -> Self {
        Self::new(CVector::zeros(mask.len()), mask)
    }

    pub fn theta(&self) -> CVector {
        self.coeffs.map(|z| z.conj())
    }

    pub fn from_theta(theta: &CVector, mask: SelectionMask) -> Self {
        Self::new(theta.map(|z| z.conj()), mask)
    }

    /// Coefficients with passive entries zeroed (diagonal of `Psi`).
    pub fn active_coeffs(&self) -> CVector {
        CVector::from_fn(self.coeffs.len(), |n, _| {
            if self.mask.is_active(n) {
                self.coeffs[n]
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    /// Amplitude bound of element `n` (`a_max` if active, 1 otherwise).
    pub fn amplitude_bound(&self, n: usize, a_max: f64) -> f64 {
        if self.mask.is_active(n) {
            a_max
        } else {
            1.0
        }
    }
}

/// Per-user received quantities for a fixed `(W, Theta)`.
#[derive(Debug, Clone)]
pub struct UserTerms {
    /// `(k, j)` entry is `h_k^H w_j`.
    pub gains: CMatrix,
    /// Amplified RIS noise reaching user `k`, summed over RISs.
    pub ris_noise: Vec<f64>,
    pub noise_user: f64,
}

impl UserTerms {
    pub fn compute(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> Self {
        let rows = effective_channels(ch, ris);
        Self::from_rows(&rows, ch, bf, ris, cfg)
    }

    pub fn from_rows(
        rows: &[CVector],
        ch: &ChannelSet,
        bf: &Beamformer,
        ris: &RisState,
        cfg: &SystemConfig,
    ) -> Self {
        let k_count = rows.len();
        let gains = CMatrix::from_fn(k_count, bf.num_users(), |k, j| {
            rows[k].dot(&bf.w.column(j))
        });
        let ris_noise = (0..k_count).map(|k| ris_noise_power(ch, ris, k, cfg)).collect();
        Self {
            gains,
            ris_noise,
            noise_user: cfg.noise_user,
        }
    }

    pub fn num_users(&self) -> usize {
        self.gains.nrows()
    }

    pub fn signal(&self, k: usize) -> f64 {
        self.gains[(k, k)].norm_sqr()
    }

    pub fn interference(&self, k: usize) -> f64 {
        (0..self.gains.ncols())
            .filter(|&j| j != k)
            .map(|j| self.gains[(k, j)].norm_sqr())
            .sum()
    }

    pub fn noise(&self, k: usize) -> f64 {
        self.ris_noise[k] + self.noise_user
    }

    /// Total received power including the desired signal.
    pub fn total_received(&self, k: usize) -> f64 {
        self.signal(k) + self.interference(k) + self.noise(k)
    }

    pub fn sinr(&self, k: usize) -> f64 {
        self.signal(k) / (self.interference(k) + self.noise(k))
    }

    pub fn sinrs(&self) -> Vec<f64> {
        (0..self.num_users()).map(|k| self.sinr(k)).collect()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.sinrs().into_iter().map(|g| (1.0 + g).log2()).collect()
    }
}

/// `sum_r sigma_r^2 ||diag(f_{r,k}^H) Psi_r||^2` for user `k`.
pub fn ris_noise_power(ch: &ChannelSet, ris: &RisState, k: usize, cfg: &SystemConfig) -> f64 {
    (0..ris.coeffs.len())
        .filter(|&n| ris.mask.is_active(n))
        .map(|n| (ch.ris_user[(k, n)] * ris.coeffs[n]).norm_sqr())
        .sum::<f64>()
        * cfg.noise_ris
}

pub fn sinr(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, k: usize, cfg: &SystemConfig) -> f64 {
    UserTerms::compute(ch, bf, ris, cfg).sinr(k)
}

/// `log2(1 + SINR_k)`, bits/s/Hz.
pub fn user_rate(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, k: usize, cfg: &SystemConfig) -> f64 {
    (1.0 + sinr(ch, bf, ris, k, cfg)).log2()
}

pub fn sum_rate(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> f64 {
    UserTerms::compute(ch, bf, ris, cfg).rates().iter().sum()
}

/// `Tr(W_l^H W_l) / mu_A`.
pub fn ap_tx_power(bf: &Beamformer, l: usize, cfg: &SystemConfig) -> f64 {
    bf.ap_block(l).norm_squared() / cfg.eff_ap
}

/// Transmit power drawn by the active elements of RIS `r`:
/// `(||Psi_r G_r W||_F^2 + sigma_r^2 sum_active |a|^2) / mu_R`.
pub fn ris_tx_power(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, r: usize, cfg: &SystemConfig) -> f64 {
    let gw = ch.ris_rows(r) * &bf.w;
    let mut total = 0.0;
    for (i, n) in ris.mask.ris_range(r).enumerate() {
        if ris.mask.is_active(n) {
            let amp2 = ris.coeffs[n].norm_sqr();
            total += amp2 * (gw.row(i).norm_squared() + cfg.noise_ris);
        }
    }
    total / cfg.eff_ris
}

/// Circuit power of APs, RIS elements (by activity) and users.
pub fn circuit_power(num_aps: usize, num_users: usize, mask: &SelectionMask, cfg: &SystemConfig) -> f64 {
    let active = mask.count_active() as f64;
    let passive = (mask.len() - mask.count_active()) as f64;
    num_aps as f64 * cfg.pc_ap
        + active * cfg.pc_active
        + passive * cfg.pc_passive
        + num_users as f64 * cfg.pc_user
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerBreakdown {
    pub ap_tx: Vec<f64>,
    pub ris_tx: Vec<f64>,
    pub circuit: f64,
    pub total: f64,
}

impl PowerBreakdown {
    pub fn ap_total(&self) -> f64 {
        self.ap_tx.iter().sum()
    }

    pub fn ris_total(&self) -> f64 {
        self.ris_tx.iter().sum()
    }
}

pub fn total_power(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> PowerBreakdown {
    let ap_tx: Vec<f64> = (0..bf.num_aps()).map(|l| ap_tx_power(bf, l, cfg)).collect();
    let ris_tx: Vec<f64> = (0..ris.mask.num_ris())
        .map(|r| ris_tx_power(ch, bf, ris, r, cfg))
        .collect();
    let circuit = circuit_power(bf.num_aps(), bf.num_users(), &ris.mask, cfg);
    let total = ap_tx.iter().sum::<f64>() + ris_tx.iter().sum::<f64>() + circuit;
    PowerBreakdown {
        ap_tx,
        ris_tx,
        circuit,
        total,
    }
}

/// Sum rate over total power, bits/Joule/Hz.
pub fn energy_efficiency(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> f64 {
    sum_rate(ch, bf, ris, cfg) / total_power(ch, bf, ris, cfg).total
}

/// Signed constraint violations in natural units (positive = violated).
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// AP power minus budget, watts, per AP.
    pub ap_power: Vec<f64>,
    /// Phase constraint; the polar representation satisfies it identically.
    pub phase: f64,
    /// `|a_n| - a_max` per active element.
    pub active_amplitude: Vec<f64>,
    /// `|a_n| - 1` per passive element.
    pub passive_amplitude: Vec<f64>,
    /// `R_th - R_k`, bits/s/Hz, per user.
    pub rate: Vec<f64>,
    /// RIS power minus budget, watts, per RIS.
    pub ris_power: Vec<f64>,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.ap_power
            .iter()
            .chain(&self.active_amplitude)
            .chain(&self.passive_amplitude)
            .chain(&self.rate)
            .chain(&self.ris_power)
            .fold(self.phase, |m, &v| m.max(v))
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

pub fn check_feasibility(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig) -> FeasibilityReport {
    let ap_power = (0..bf.num_aps())
        .map(|l| ap_tx_power(bf, l, cfg) - cfg.p_max_ap)
        .collect();
    let mut active_amplitude = Vec::new();
    let mut passive_amplitude = Vec::new();
    for n in 0..ris.coeffs.len() {
        let amp = ris.coeffs[n].norm();
        if ris.mask.is_active(n) {
            active_amplitude.push(amp - cfg.a_max);
        } else {
            passive_amplitude.push(amp - 1.0);
        }
    }
    let rate = UserTerms::compute(ch, bf, ris, cfg)
        .rates()
        .into_iter()
        .map(|r| cfg.rate_threshold - r)
        .collect();
    let ris_power = (0..ris.mask.num_ris())
        .map(|r| ris_tx_power(ch, bf, ris, r, cfg) - cfg.p_max_ris)
        .collect();
    FeasibilityReport {
        ap_power,
        phase: 0.0,
        active_amplitude,
        passive_amplitude,
        rate,
        ris_power,
    }
}

/// Amplitudes of the active elements.
pub fn active_amplitudes(ris: &RisState) -> DVector<f64> {
    let v: Vec<f64> = (0..ris.coeffs.len())
        .filter(|&n| ris.mask.is_active(n))
        .map(|n| ris.coeffs[n].norm())
        .collect();
    DVector::from_vec(v)
}

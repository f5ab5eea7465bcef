//! Outer alternating-optimization loop, initialization and the baseline
//! schemes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::channel::{effective_channels, synthesize_channels_from_seed, ChannelSet};
use crate::metrics::{
    check_feasibility, energy_efficiency, ris_tx_power, total_power, Beamformer, PowerBreakdown, RisState,
    UserTerms,
};
use crate::scenario::{build_selection_mask, place_nodes, validate_config, NetworkGeometry, SelectionMask, SystemConfig};
use crate::solver::{solve_beamforming, solve_beamforming_with_floors, solve_ris, solve_ris_with_floors, BlockOptions, SubproblemError};
use crate::transforms::{eval_f1, eval_f3, SlackState};
use crate::{CMatrix, CVector, Complex64, RandomSource};

/// Max weight-doubling rounds of the initial feasibility search.
const FEASIBILITY_ROUNDS: usize = 60;
/// Rate margin (bits/s/Hz) the feasibility search aims for above the threshold.
const RATE_MARGIN: f64 = 1e-6;
/// Signal-to-noise ratio below which a user's beam counts as switched off.
const COLLAPSED_SIGNAL: f64 = 1e-9;
/// Step multipliers 2, 4, ..., 2^EXTRAPOLATION_DOUBLINGS tried after each
/// outer iteration.
const EXTRAPOLATION_DOUBLINGS: i32 = 12;
/// Golden-section steps of the power-scale search.
const POWER_SEARCH_STEPS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineMode {
    /// Hybrid RIS with the configured number of active elements.
    Proposed,
    /// Every RIS element active.
    ActiveRis,
    /// Every RIS element passive.
    PassiveRis,
    /// Coefficients drawn once at random and never optimized.
    RandomTheta,
    /// RISs replaced by APs at the same sites.
    AllAp,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 5] = [
        BaselineMode::Proposed,
        BaselineMode::ActiveRis,
        BaselineMode::PassiveRis,
        BaselineMode::RandomTheta,
        BaselineMode::AllAp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMode::Proposed => "proposed",
            BaselineMode::ActiveRis => "active_ris",
            BaselineMode::PassiveRis => "passive_ris",
            BaselineMode::RandomTheta => "random_theta",
            BaselineMode::AllAp => "all_ap",
        }
    }

    /// Whether the RIS coefficients are an optimization block.
    pub fn optimizes_ris(self) -> bool {
        !matches!(self, BaselineMode::RandomTheta | BaselineMode::AllAp)
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        BaselineMode::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "hybrid" && *m == BaselineMode::Proposed))
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no feasible starting point (worst rate shortfall {shortfall:.3e} bits/s/Hz)")]
    InfeasibleTrial { shortfall: f64 },
    #[error("iteration {iter}: {source}")]
    Solver {
        iter: usize,
        #[source]
        source: SubproblemError,
    },
}

/// A network realization prepared for one mode: the effective configuration
/// (counts and budgets after the mode's adjustments), its channels and mask.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mode: BaselineMode,
    pub cfg: SystemConfig,
    pub geometry: NetworkGeometry,
    pub channels: ChannelSet,
    pub mask: SelectionMask,
}

impl Problem {
    /// Applies `mode` to `cfg` and `geometry` and draws channels from
    /// `channel_seed`. Links shared between modes get identical draws.
    pub fn build(cfg: &SystemConfig, geometry: &NetworkGeometry, mode: BaselineMode, channel_seed: u64) -> Self {
        let mut cfg = cfg.clone();
        let mut geometry = geometry.clone();
        match mode {
            BaselineMode::Proposed | BaselineMode::RandomTheta => {}
            BaselineMode::ActiveRis => cfg.active_per_ris = cfg.elements_per_ris,
            BaselineMode::PassiveRis => cfg.active_per_ris = 0,
            BaselineMode::AllAp => {
                let (l, r) = (cfg.num_aps, cfg.num_ris);
                cfg.p_max_ap *= l as f64 / (l + r) as f64;
                cfg.num_aps = l + r;
                cfg.num_ris = 0;
                geometry.ap_positions.extend(geometry.ris_positions.drain(..));
            }
        }
        let channels = synthesize_channels_from_seed(&cfg, &geometry, channel_seed);
        let mask = build_selection_mask(&cfg);
        Self {
            mode,
            cfg,
            geometry,
            channels,
            mask,
        }
    }

    /// Overrides the channels (tests and replay of dumped realizations).
    pub fn with_channels(mut self, channels: ChannelSet) -> Self {
        self.channels = channels;
        self
    }
}

/// Snapshot of one outer iteration.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub iter: usize,
    /// Energy efficiency, bits/Joule/Hz.
    pub eta: f64,
    pub sum_rate: f64,
    pub rates: Vec<f64>,
    pub power: PowerBreakdown,
    /// Dinkelbach objective at this iterate with the iteration's multiplier.
    pub f1: f64,
    /// Quadratic-transform objective at this iterate with the iteration's slack.
    pub f3: f64,
    pub slack: SlackState,
    pub max_violation: f64,
    /// Seconds since the start of `optimize`.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// The starting point (iteration 0); not counted in `entries`.
    pub initial: TraceEntry,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
}

impl IterationTrace {
    pub fn final_eta(&self) -> f64 {
        self.entries.last().unwrap_or(&self.initial).eta
    }

    pub fn etas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.eta).collect()
    }
}

/// `|f1|` at the last recorded iterate, with the multiplier used in that
/// iteration. Small values certify a Dinkelbach fixed point.
pub fn dinkelbach_residual(trace: &IterationTrace) -> f64 {
    trace.entries.last().unwrap_or(&trace.initial).f1.abs()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub beamformer: Beamformer,
    pub ris: RisState,
    pub trace: IterationTrace,
}

fn snapshot(
    problem: &Problem,
    bf: &Beamformer,
    ris: &RisState,
    slack: &SlackState,
    iter: usize,
    start: Instant,
) -> TraceEntry {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let rates = UserTerms::compute(ch, bf, ris, cfg).rates();
    TraceEntry {
        iter,
        eta: energy_efficiency(ch, bf, ris, cfg),
        sum_rate: rates.iter().sum(),
        rates,
        power: total_power(ch, bf, ris, cfg),
        f1: eval_f1(ch, bf, ris, slack.y_hat, cfg),
        f3: eval_f3(ch, bf, ris, slack, cfg),
        slack: slack.clone(),
        max_violation: check_feasibility(ch, bf, ris, cfg).max_violation(),
        wall_time: start.elapsed().as_secs_f64(),
    }
}

/// Active amplitude that keeps the amplified RIS noise within half of each
/// RIS budget, capped at `a_max`.
fn initial_active_amplitude(mask: &SelectionMask, cfg: &SystemConfig) -> f64 {
    let most_active = (0..mask.num_ris()).map(|r| mask.active_count_in(r)).max().unwrap_or(0);
    if most_active == 0 {
        return cfg.a_max;
    }
    let noise_limited = (0.5 * cfg.eff_ris * cfg.p_max_ris / (most_active as f64 * cfg.noise_ris)).sqrt();
    cfg.a_max.min(noise_limited)
}

/// Random phases; passive amplitude 1.
fn initial_ris<R: Rng + ?Sized>(mask: &SelectionMask, cfg: &SystemConfig, rng: &mut R) -> RisState {
    let active_amp = initial_active_amplitude(mask, cfg);
    let coeffs = CVector::from_fn(mask.len(), |n, _| {
        let amp = if mask.is_active(n) { active_amp } else { 1.0 };
        Complex64::from_polar(amp, rng.random::<f64>() * std::f64::consts::TAU)
    });
    RisState::new(coeffs, mask.clone())
}

/// Maximum-ratio columns with equal power, scaled by the largest common
/// factor meeting the AP and RIS power budgets.
fn initial_beamformer(ch: &ChannelSet, ris: &RisState, cfg: &SystemConfig) -> Beamformer {
    let m = ch.total_antennas();
    let rows = effective_channels(ch, ris);
    let mut w = CMatrix::zeros(m, ch.num_users);
    for (k, row) in rows.iter().enumerate() {
        let norm = row.norm();
        if norm > 0.0 {
            w.set_column(k, &(row.map(|z| z.conj()) / Complex64::new(norm, 0.0)));
        }
    }
    let bf = Beamformer::new(w, ch.antennas_per_ap);
    let mut t2 = f64::INFINITY;
    for l in 0..ch.num_aps {
        let p = bf.ap_block(l).norm_squared() / cfg.eff_ap;
        if p > 0.0 {
            t2 = t2.min(cfg.p_max_ap / p);
        }
    }
    let zero_bf = Beamformer::zeros(ch.num_aps, ch.antennas_per_ap, ch.num_users);
    for r in 0..ris.mask.num_ris() {
        let noise = ris_tx_power(ch, &zero_bf, ris, r, cfg);
        let signal = ris_tx_power(ch, &bf, ris, r, cfg) - noise;
        if signal > 0.0 {
            t2 = t2.min(((cfg.p_max_ris - noise) / signal).max(0.0));
        }
    }
    if !t2.is_finite() {
        t2 = 0.0;
    }
    Beamformer::new(bf.w * Complex64::new(t2.sqrt(), 0.0), ch.antennas_per_ap)
}

fn rate_shortfall(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, cfg: &SystemConfig, margin: f64) -> f64 {
    UserTerms::compute(ch, bf, ris, cfg)
        .rates()
        .iter()
        .map(|r| cfg.rate_threshold + margin - r)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Weighted sum-rate ascent toward a feasible point. Each user keeps a SINR
/// floor at the smaller of its current value and the target, so the worst
/// rate never drops. Log-weights move in proportion to each user's rate gap,
/// with the step halved whenever the failing set flips.
fn feasibility_phase(
    problem: &Problem,
    mut bf: Beamformer,
    mut ris: RisState,
) -> Result<(Beamformer, RisState), DriverError> {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let mut opts = BlockOptions::from_config(cfg);
    opts.rate_constraints = false;
    let mut log_w = vec![0.0; ch.num_users];
    let mut step = std::f64::consts::LN_2;
    let mut prev_failing: Option<Vec<bool>> = None;
    for round in 0..FEASIBILITY_ROUNDS {
        let mut terms = UserTerms::compute(ch, &bf, &ris, cfg);
        // A beam that collapsed to zero gets no pull from the transform
        // (its slack is zero too), so restart from maximum ratio.
        let collapsed = (0..ch.num_users).any(|k| terms.signal(k) <= COLLAPSED_SIGNAL * terms.noise(k));
        if collapsed {
            log::debug!("round {round}: restarting collapsed beams");
            bf = initial_beamformer(ch, &ris, cfg);
            terms = UserTerms::compute(ch, &bf, &ris, cfg);
        }
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sinrs = terms.sinrs();
        let eps_hat: Vec<f64> = sinrs.iter().zip(&log_w).map(|(g, lw)| (lw - top).exp() * (1.0 + g) - 1.0).collect();
        let rho_hat = (0..ch.num_users)
            .map(|k| terms.gains[(k, k)] * ((1.0 + eps_hat[k]).sqrt() / terms.total_received(k)))
            .collect();
        let slack = SlackState {
            y_hat: 0.0,
            eps_hat,
            rho_hat,
        };
        let target = 2f64.powf(cfg.rate_threshold + RATE_MARGIN) - 1.0;
        let floors: Vec<f64> = sinrs.iter().map(|g| g.min(target)).collect();
        bf = solve_beamforming_with_floors(ch, &ris, &slack, &bf, cfg, &opts, &floors)
            .map_err(|source| DriverError::Solver { iter: round, source })?
            .0;
        if problem.mode.optimizes_ris() && !ris.coeffs.is_empty() {
            let sinrs = UserTerms::compute(ch, &bf, &ris, cfg).sinrs();
            let floors: Vec<f64> = sinrs.iter().map(|g| g.min(target)).collect();
            ris = solve_ris_with_floors(ch, &bf, &slack, &ris, cfg, &opts, Some(&floors))
                .map_err(|source| DriverError::Solver { iter: round, source })?
                .0;
        }
        let rates = UserTerms::compute(ch, &bf, &ris, cfg).rates();
        log::trace!("round {round}: log-weights {log_w:?} rates {rates:?}");
        let gaps: Vec<f64> = rates.iter().map(|r| cfg.rate_threshold + RATE_MARGIN - r).collect();
        if gaps.iter().all(|g| *g <= 0.0) {
            log::debug!("feasible start after {} weighted rounds", round + 1);
            return Ok((bf, ris));
        }
        let failing: Vec<bool> = gaps.iter().map(|g| *g > 0.0).collect();
        if let Some(prev) = &prev_failing {
            let overlap = prev.iter().zip(&failing).any(|(a, b)| *a && *b);
            if *prev != failing && !overlap {
                step *= 0.5;
            }
        }
        let worst = gaps.iter().copied().fold(0.0, f64::max);
        for (lw, g) in log_w.iter_mut().zip(&gaps) {
            *lw += step * (g / worst).clamp(-1.0, 1.0);
        }
        prev_failing = Some(failing);
    }
    let shortfall = rate_shortfall(ch, &bf, &ris, cfg, 0.0);
    log::warn!("no feasible start found, worst rate shortfall {shortfall:.3e}");
    Err(DriverError::InfeasibleTrial { shortfall })
}

/// Starting point satisfying every constraint, plus the slack variables from
/// the closed-form updates at that point.
pub fn initialize<R: Rng + ?Sized>(
    problem: &Problem,
    rng: &mut R,
) -> Result<(Beamformer, RisState, SlackState), DriverError> {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let ris = initial_ris(&problem.mask, cfg, rng);
    let bf = initial_beamformer(ch, &ris, cfg);
    let (bf, ris) = if rate_shortfall(ch, &bf, &ris, cfg, 0.0) > 0.0 {
        feasibility_phase(problem, bf, ris)?
    } else {
        (bf, ris)
    };
    let slack = SlackState::updated(ch, &bf, &ris, cfg);
    Ok((bf, ris, slack))
}

fn project(problem: &Problem, bf: &mut Beamformer, ris: &mut RisState) {
    let cfg = &problem.cfg;
    let nt = bf.antennas_per_ap;
    let cap = cfg.eff_ap * cfg.p_max_ap;
    for l in 0..bf.num_aps() {
        let energy = bf.ap_block(l).norm_squared();
        if energy > cap {
            bf.w.rows_mut(l * nt, nt).scale_mut((cap / energy).sqrt());
        }
    }
    for n in 0..ris.coeffs.len() {
        let bound = ris.amplitude_bound(n, cfg.a_max);
        let amp = ris.coeffs[n].norm();
        if amp > bound {
            ris.coeffs[n] *= bound / amp;
        }
    }
}

/// Largest common factor on `W` that keeps every AP and RIS power budget.
fn max_power_scale(problem: &Problem, bf: &Beamformer, ris: &RisState) -> f64 {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let mut c2 = f64::INFINITY;
    for l in 0..bf.num_aps() {
        let p = bf.ap_block(l).norm_squared() / cfg.eff_ap;
        if p > 0.0 {
            c2 = c2.min(cfg.p_max_ap / p);
        }
    }
    let zero_bf = Beamformer::zeros(ch.num_aps, ch.antennas_per_ap, ch.num_users);
    for r in 0..ris.mask.num_ris() {
        let noise = ris_tx_power(ch, &zero_bf, ris, r, cfg);
        let signal = ris_tx_power(ch, bf, ris, r, cfg) - noise;
        if signal > 0.0 {
            c2 = c2.min(((cfg.p_max_ris - noise) / signal).max(0.0));
        }
    }
    c2.sqrt()
}

/// Golden-section search of the energy efficiency over a common scale of
/// `W` (log-spaced between 1/16 and the budget limit). Returns the scaled
/// beamformer only when it is feasible and strictly better.
fn rescale_power(problem: &Problem, bf: &Beamformer, ris: &RisState, allowed: f64) -> Option<Beamformer> {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let hi = max_power_scale(problem, bf, ris).min(16.0);
    if !(hi > 0.0) {
        return None;
    }
    let scaled = |c: f64| Beamformer::new(&bf.w * Complex64::new(c, 0.0), bf.antennas_per_ap);
    let ee = |log_c: f64| energy_efficiency(ch, &scaled(log_c.exp()), ris, cfg);
    let (mut a, mut b) = ((1.0f64 / 16.0).ln(), hi.ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (ee(c), ee(d));
    for _ in 0..POWER_SEARCH_STEPS {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = ee(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = ee(d);
        }
    }
    let best = scaled(if fc > fd { c } else { d }.exp());
    let improves = energy_efficiency(ch, &best, ris, cfg) > energy_efficiency(ch, bf, ris, cfg);
    (improves && check_feasibility(ch, &best, ris, cfg).max_violation() <= allowed).then_some(best)
}

/// Speeds up the slow tail of the block updates.
///
/// When the SINRs are high the quadratic-transform steps contract slowly:
/// the transmit power creeps toward its optimum and the RIS coefficients keep
/// stepping the same way for many iterations. After each iteration the
/// common power scale of `W` is therefore optimized directly, and the RIS
/// step (in amplitude and phase) is stretched by 2, 4, 8, ... while that
/// keeps raising the energy efficiency. Every candidate must stay feasible.
fn extrapolate(
    problem: &Problem,
    bf_prev: &Beamformer,
    ris_prev: &RisState,
    bf: Beamformer,
    ris: RisState,
) -> (Beamformer, RisState) {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let dw = &bf.w - &bf_prev.w;
    let allowed = check_feasibility(ch, &bf, &ris, cfg).max_violation().max(0.0);
    let polar: Vec<(f64, f64)> = ris
        .coeffs
        .iter()
        .zip(ris_prev.coeffs.iter())
        .map(|(new, old)| (new.norm() - old.norm(), (new * old.conj()).arg()))
        .collect();
    let mut best_eta = energy_efficiency(ch, &bf, &ris, cfg);
    let mut best = (bf, ris);
    if dw.norm() > 0.0 || polar.iter().any(|&(a, p)| a != 0.0 || p != 0.0) {
        for d in 1..=EXTRAPOLATION_DOUBLINGS {
            let t = 2f64.powi(d);
            let mut cand = best.clone();
            cand.0.w = &bf_prev.w + &dw * Complex64::new(t, 0.0);
            cand.1.coeffs = CVector::from_fn(polar.len(), |n, _| {
                let old = ris_prev.coeffs[n];
                let (d_amp, d_phase) = polar[n];
                Complex64::from_polar((old.norm() + t * d_amp).max(0.0), old.arg() + t * d_phase)
            });
            project(problem, &mut cand.0, &mut cand.1);
            let eta = energy_efficiency(ch, &cand.0, &cand.1, cfg);
            if !(eta > best_eta) || check_feasibility(ch, &cand.0, &cand.1, cfg).max_violation() > allowed {
                break;
            }
            best_eta = eta;
            best = cand;
        }
    }
    if let Some(bf) = rescale_power(problem, &best.0, &best.1, allowed) {
        best.0 = bf;
    }
    best
}

/// Runs the alternating updates of the multiplier, slack variables,
/// beamformer and RIS coefficients until the energy efficiency settles.
pub fn optimize<R: Rng + ?Sized>(problem: &Problem, rng: &mut R) -> Result<RunOutcome, DriverError> {
    let (ch, cfg) = (&problem.channels, &problem.cfg);
    let start = Instant::now();
    let (mut bf, mut ris, slack0) = initialize(problem, rng)?;
    let opts = BlockOptions::from_config(cfg);
    let initial = snapshot(problem, &bf, &ris, &slack0, 0, start);
    let mut prev_eta = initial.eta;
    let mut entries = Vec::with_capacity(cfg.max_outer_iters);
    let mut converged = false;

    for iter in 1..=cfg.max_outer_iters {
        let (bf_prev, ris_prev) = (bf.clone(), ris.clone());
        let y_hat = energy_efficiency(ch, &bf, &ris, cfg);
        let mut slack = SlackState::updated(ch, &bf, &ris, cfg);
        for pass in 0..cfg.inner_passes.max(1) {
            if pass > 0 {
                slack = SlackState::updated(ch, &bf, &ris, cfg);
                slack.y_hat = y_hat;
            }
            bf = solve_beamforming(ch, &ris, &slack, &bf, cfg, &opts)
                .map_err(|source| DriverError::Solver { iter, source })?
                .0;
            if problem.mode.optimizes_ris() && !ris.coeffs.is_empty() {
                ris = solve_ris(ch, &bf, &slack, &ris, cfg, &opts)
                    .map_err(|source| DriverError::Solver { iter, source })?
                    .0;
            }
        }
        if cfg.extrapolate {
            (bf, ris) = extrapolate(problem, &bf_prev, &ris_prev, bf, ris);
        }
        let entry = snapshot(problem, &bf, &ris, &slack, iter, start);
        let eta = entry.eta;
        log::trace!("iter {iter}: eta {eta:.6e}");
        entries.push(entry);
        if (eta - prev_eta).abs() < cfg.tol_eta * prev_eta.abs() {
            converged = true;
            break;
        }
        prev_eta = eta;
    }

    Ok(RunOutcome {
        beamformer: bf,
        ris,
        trace: IterationTrace {
            initial,
            entries,
            converged,
        },
    })
}

/// One trial: user placement and channels from `channel_seed`, algorithm
/// randomness from `algo_seed`.
pub fn run_trial(
    cfg: &SystemConfig,
    mode: BaselineMode,
    channel_seed: u64,
    algo_seed: u64,
) -> Result<RunOutcome, DriverError> {
    let report = validate_config(cfg);
    if !report.is_ok() {
        return Err(DriverError::InvalidConfig(report.to_string()));
    }
    let mut geo_rng = RandomSource::seed_from_u64(channel_seed);
    let geometry = place_nodes(cfg, &mut geo_rng);
    let problem = Problem::build(cfg, &geometry, mode, channel_seed);
    optimize(&problem, &mut RandomSource::seed_from_u64(algo_seed))
}

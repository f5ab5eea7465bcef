//! System configuration, node placement and the active-element mask.
//!
//! All quantities inside [`SystemConfig`] are linear: watts, linear gains,
//! bits/s/Hz. Logarithmic units are only accepted by the config-file loader
//! ([`ConfigFile`]).

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{db_to_linear, dbm_to_watts};

/// Every physical and algorithmic parameter of one simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of access points (L).
    pub num_aps: usize,
    /// Antennas per AP (N_t).
    pub antennas_per_ap: usize,
    /// Number of RISs (R).
    pub num_ris: usize,
    /// Reflecting elements per RIS (N_s).
    pub elements_per_ris: usize,
    /// Active (amplifying) elements per RIS (N_a).
    pub active_per_ris: usize,
    /// Single-antenna users (K).
    pub num_users: usize,
    /// Side of the square deployment area, meters.
    pub area_side: f64,
    /// Per-AP transmit power budget, watts.
    pub p_max_ap: f64,
    /// Per-RIS transmit power budget of the active elements, watts.
    pub p_max_ris: f64,
    /// Maximum amplitude of an active element.
    pub a_max: f64,
    /// AWGN power at the users, watts.
    pub noise_user: f64,
    /// Effective noise power of an active element, watts.
    pub noise_ris: f64,
    /// AP amplifier efficiency in (0, 1].
    pub eff_ap: f64,
    /// RIS amplifier efficiency in (0, 1].
    pub eff_ris: f64,
    /// Minimum per-user rate, bits/s/Hz.
    pub rate_threshold: f64,
    /// Rician factor, linear.
    pub rician_factor: f64,
    /// Path gain at the reference distance, linear.
    pub ref_gain: f64,
    /// Reference distance, meters.
    pub ref_distance: f64,
    /// Path-loss exponent of AP-user links.
    pub pl_exp_direct: f64,
    /// Path-loss exponent of AP-RIS links.
    pub pl_exp_ap_ris: f64,
    /// Path-loss exponent of RIS-user links.
    pub pl_exp_ris_user: f64,
    /// Circuit power per AP, watts.
    pub pc_ap: f64,
    /// Circuit power per passive RIS element, watts.
    pub pc_passive: f64,
    /// Circuit power per active RIS element, watts.
    pub pc_active: f64,
    /// Circuit power per user, watts.
    pub pc_user: f64,
    pub seed: u64,
    pub max_outer_iters: usize,
    /// Relative change of the energy efficiency that stops the outer loop.
    pub tol_eta: f64,
    pub tol_feas: f64,
    pub tol_kkt: f64,
    /// Iteration cap of the inner convex solver.
    pub solver_max_iters: usize,
    /// Beamformer/RIS passes (each re-linearized) per multiplier update;
    /// 1 is one pass per outer iteration.
    pub inner_passes: usize,
    /// Safeguarded extrapolation along each outer step (accepted only if it
    /// stays feasible and raises the energy efficiency).
    pub extrapolate: bool,
}

impl SystemConfig {
    /// The full-size setup of the reference simulation (4 APs with 6 antennas,
    /// 2 RISs with 80 elements of which 3 active, 4 users).
    pub fn paper() -> Self {
        Self {
            num_aps: 4,
            antennas_per_ap: 6,
            num_ris: 2,
            elements_per_ris: 80,
            active_per_ris: 3,
            num_users: 4,
            area_side: 200.0,
            p_max_ap: dbm_to_watts(20.0),
            p_max_ris: dbm_to_watts(10.0),
            a_max: 10.0,
            noise_user: dbm_to_watts(-80.0),
            noise_ris: dbm_to_watts(-76.0),
            eff_ap: 0.8,
            eff_ris: 0.8,
            rate_threshold: db_to_linear(0.0),
            rician_factor: db_to_linear(3.0),
            ref_gain: db_to_linear(-30.0),
            ref_distance: 1.0,
            pl_exp_direct: 2.8,
            pl_exp_ap_ris: 2.2,
            pl_exp_ris_user: 2.2,
            pc_ap: 0.1,
            pc_passive: 0.01,
            pc_active: 0.025,
            pc_user: 0.01,
            seed: 0,
            max_outer_iters: 30,
            tol_eta: 1e-4,
            tol_feas: 1e-7,
            tol_kkt: 1e-6,
            solver_max_iters: 5000,
            inner_passes: 1,
            extrapolate: true,
        }
    }

    /// Desk-scale profile used by CI: same physics, smaller network.
    pub fn ci() -> Self {
        Self {
            num_aps: 2,
            antennas_per_ap: 2,
            num_ris: 2,
            elements_per_ris: 16,
            active_per_ris: 2,
            num_users: 2,
            ..Self::paper()
        }
    }

    /// Total number of RIS elements, N = R * N_s.
    pub fn total_elements(&self) -> usize {
        self.num_ris * self.elements_per_ris
    }

    /// Total transmit antennas, L * N_t.
    pub fn total_antennas(&self) -> usize {
        self.num_aps * self.antennas_per_ap
    }

    /// SINR threshold 2^R_th - 1 equivalent to the rate threshold.
    pub fn sinr_threshold(&self) -> f64 {
        2f64.powf(self.rate_threshold) - 1.0
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Outcome of [`validate_config`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "configuration valid")
        } else {
            write!(f, "invalid configuration: {}", self.violations.join("; "))
        }
    }
}

/// Checks every structural invariant of a configuration without touching it.
pub fn validate_config(cfg: &SystemConfig) -> ValidationReport {
    let mut v = Vec::new();
    let counts = [
        ("num_aps", cfg.num_aps),
        ("antennas_per_ap", cfg.antennas_per_ap),
        ("num_ris", cfg.num_ris),
        ("elements_per_ris", cfg.elements_per_ris),
        ("active_per_ris", cfg.active_per_ris),
        ("num_users", cfg.num_users),
        ("max_outer_iters", cfg.max_outer_iters),
        ("solver_max_iters", cfg.solver_max_iters),
        ("inner_passes", cfg.inner_passes),
    ];
    for (name, value) in counts {
        if value < 1 {
            v.push(format!("{name} must be at least 1"));
        }
    }
    if cfg.active_per_ris > cfg.elements_per_ris {
        v.push("N_a exceeds N_s".to_string());
    }
    for (name, value) in [("eff_ap", cfg.eff_ap), ("eff_ris", cfg.eff_ris)] {
        if !(value > 0.0 && value <= 1.0) {
            v.push(format!("{name}: amplifier efficiency must be in (0,1]"));
        }
    }
    if !(cfg.a_max >= 1.0) {
        v.push("a_max must be at least 1".to_string());
    }
    let positive = [
        ("area_side", cfg.area_side),
        ("p_max_ap", cfg.p_max_ap),
        ("p_max_ris", cfg.p_max_ris),
        ("noise_user", cfg.noise_user),
        ("noise_ris", cfg.noise_ris),
        ("ref_gain", cfg.ref_gain),
        ("ref_distance", cfg.ref_distance),
        ("pc_ap", cfg.pc_ap),
        ("pc_passive", cfg.pc_passive),
        ("pc_active", cfg.pc_active),
        ("pc_user", cfg.pc_user),
        ("tol_eta", cfg.tol_eta),
        ("tol_feas", cfg.tol_feas),
        ("tol_kkt", cfg.tol_kkt),
    ];
    for (name, value) in positive {
        if !(value > 0.0 && value.is_finite()) {
            v.push(format!("{name} must be strictly positive"));
        }
    }
    if !(cfg.rate_threshold >= 0.0 && cfg.rate_threshold.is_finite()) {
        v.push("rate_threshold must be non-negative".to_string());
    }
    if !(cfg.rician_factor >= 0.0) {
        v.push("rician_factor must be non-negative".to_string());
    }
    for (name, value) in [
        ("pl_exp_direct", cfg.pl_exp_direct),
        ("pl_exp_ap_ris", cfg.pl_exp_ap_ris),
        ("pl_exp_ris_user", cfg.pl_exp_ris_user),
    ] {
        if !value.is_finite() || value < 0.0 {
            v.push(format!("{name} must be a non-negative finite exponent"));
        }
    }
    ValidationReport { violations: v }
}

/// A point in the deployment plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGeometry {
    pub ap_positions: Vec<Point>,
    pub ris_positions: Vec<Point>,
    pub user_positions: Vec<Point>,
}

/// APs on the centers of a near-square grid of cells, RISs on the midpoints
/// of the bottom and top edges (alternating), users uniform in the square.
pub fn place_nodes<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> NetworkGeometry {
    let side = cfg.area_side;
    let ap_positions = ap_grid(cfg.num_aps, side);
    let ris_positions = ris_edge_positions(cfg.num_ris, side);
    let user_positions = (0..cfg.num_users)
        .map(|_| Point::new(rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect();
    NetworkGeometry {
        ap_positions,
        ris_positions,
        user_positions,
    }
}

fn ap_grid(count: usize, side: f64) -> Vec<Point> {
    if count == 0 {
        return Vec::new();
    }
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let (dx, dy) = (side / cols as f64, side / rows as f64);
    (0..cols)
        .flat_map(|c| (0..rows).map(move |r| (c, r)))
        .take(count)
        .map(|(c, r)| Point::new((c as f64 + 0.5) * dx, (r as f64 + 0.5) * dy))
        .collect()
}

fn ris_edge_positions(count: usize, side: f64) -> Vec<Point> {
    let per_edge = count.div_ceil(2);
    (0..count)
        .map(|i| {
            let slot = (i / 2 + 1) as f64 / (per_edge + 1) as f64;
            let y = if i % 2 == 0 { 0.0 } else { side };
            Point::new(slot * side, y)
        })
        .collect()
}

/// Diagonal of the active-element selection matrix over all `R * N_s` elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub active: Vec<bool>,
    pub elements_per_ris: usize,
}

impl SelectionMask {
    /// Marks the first `active_per_ris` elements of each RIS as active.
    pub fn first_per_ris(num_ris: usize, elements_per_ris: usize, active_per_ris: usize) -> Self {
        let active = (0..num_ris * elements_per_ris)
            .map(|n| n % elements_per_ris < active_per_ris)
            .collect();
        Self {
            active,
            elements_per_ris,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn num_ris(&self) -> usize {
        if self.elements_per_ris == 0 {
            0
        } else {
            self.active.len() / self.elements_per_ris
        }
    }

    pub fn is_active(&self, n: usize) -> bool {
        self.active[n]
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Global element indices belonging to RIS `r`.
    pub fn ris_range(&self, r: usize) -> std::ops::Range<usize> {
        r * self.elements_per_ris..(r + 1) * self.elements_per_ris
    }

    /// Global indices of the active elements of RIS `r`.
    pub fn active_in(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.ris_range(r).filter(move |&n| self.active[n])
    }

    pub fn active_count_in(&self, r: usize) -> usize {
        self.active_in(r).count()
    }
}

pub fn build_selection_mask(cfg: &SystemConfig) -> SelectionMask {
    SelectionMask::first_per_ris(cfg.num_ris, cfg.elements_per_ris, cfg.active_per_ris)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(ValidationReport),
}

/// Flat key/value config document.
///
/// Every key is optional and overrides the base profile. Powers are given in
/// dBm, gains and the Rician factor in dB, the rate threshold in dB of
/// bits/s/Hz (0 dB = 1 bit/s/Hz). Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub num_aps: Option<usize>,
    pub antennas_per_ap: Option<usize>,
    pub num_ris: Option<usize>,
    pub elements_per_ris: Option<usize>,
    pub active_per_ris: Option<usize>,
    pub num_users: Option<usize>,
    pub area_side_m: Option<f64>,
    pub p_max_ap_dbm: Option<f64>,
    pub p_max_ris_dbm: Option<f64>,
    pub a_max: Option<f64>,
    pub noise_user_dbm: Option<f64>,
    pub noise_ris_dbm: Option<f64>,
    pub eff_ap: Option<f64>,
    pub eff_ris: Option<f64>,
    pub rate_threshold_db: Option<f64>,
    pub rician_factor_db: Option<f64>,
    pub ref_gain_db: Option<f64>,
    pub ref_distance_m: Option<f64>,
    pub pl_exp_direct: Option<f64>,
    pub pl_exp_ap_ris: Option<f64>,
    pub pl_exp_ris_user: Option<f64>,
    pub pc_ap_dbm: Option<f64>,
    pub pc_passive_dbm: Option<f64>,
    pub pc_active_dbm: Option<f64>,
    pub pc_user_dbm: Option<f64>,
    pub seed: Option<u64>,
    pub max_outer_iters: Option<usize>,
    pub tol_eta: Option<f64>,
    pub tol_feas: Option<f64>,
    pub tol_kkt: Option<f64>,
    pub solver_max_iters: Option<usize>,
    pub inner_passes: Option<usize>,
    pub extrapolate: Option<bool>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overlays the present keys onto `base`, converting to linear units.
    pub fn apply(&self, base: &SystemConfig) -> SystemConfig {
        let mut c = base.clone();
        macro_rules! set {
            ($field:ident, $key:ident) => {
                if let Some(v) = self.$key {
                    c.$field = v;
                }
            };
            ($field:ident, $key:ident, $conv:expr) => {
                if let Some(v) = self.$key {
                    c.$field = $conv(v);
                }
            };
        }
        set!(num_aps, num_aps);
        set!(antennas_per_ap, antennas_per_ap);
        set!(num_ris, num_ris);
        set!(elements_per_ris, elements_per_ris);
        set!(active_per_ris, active_per_ris);
        set!(num_users, num_users);
        set!(area_side, area_side_m);
        set!(p_max_ap, p_max_ap_dbm, dbm_to_watts);
        set!(p_max_ris, p_max_ris_dbm, dbm_to_watts);
        set!(a_max, a_max);
        set!(noise_user, noise_user_dbm, dbm_to_watts);
        set!(noise_ris, noise_ris_dbm, dbm_to_watts);
        set!(eff_ap, eff_ap);
        set!(eff_ris, eff_ris);
        set!(rate_threshold, rate_threshold_db, db_to_linear);
        set!(rician_factor, rician_factor_db, db_to_linear);
        set!(ref_gain, ref_gain_db, db_to_linear);
        set!(ref_distance, ref_distance_m);
        set!(pl_exp_direct, pl_exp_direct);
        set!(pl_exp_ap_ris, pl_exp_ap_ris);
        set!(pl_exp_ris_user, pl_exp_ris_user);
        set!(pc_ap, pc_ap_dbm, dbm_to_watts);
        set!(pc_passive, pc_passive_dbm, dbm_to_watts);
        set!(pc_active, pc_active_dbm, dbm_to_watts);
        set!(pc_user, pc_user_dbm, dbm_to_watts);
        set!(seed, seed);
        set!(max_outer_iters, max_outer_iters);
        set!(tol_eta, tol_eta);
        set!(tol_feas, tol_feas);
        set!(tol_kkt, tol_kkt);
        set!(solver_max_iters, solver_max_iters);
        set!(inner_passes, inner_passes);
        set!(extrapolate, extrapolate);
        c
    }
}

/// Loads a config file on top of `base` and validates the result.
pub fn load_config(path: &Path, base: &SystemConfig) -> Result<SystemConfig, ConfigError> {
    let cfg = ConfigFile::load(path)?.apply(base);
    let report = validate_config(&cfg);
    if report.is_ok() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn paper_config_is_valid() {
        let cfg = SystemConfig::paper();
        assert!(validate_config(&cfg).is_ok());
        assert_eq!(
            (cfg.num_aps, cfg.antennas_per_ap, cfg.num_ris, cfg.num_users),
            (4, 6, 2, 4)
        );
        assert_eq!((cfg.elements_per_ris, cfg.active_per_ris), (80, 3));
        assert!(validate_config(&SystemConfig::ci()).is_ok());
    }

    #[test]
    fn too_many_active_elements() {
        let mut cfg = SystemConfig::ci();
        cfg.active_per_ris = cfg.elements_per_ris + 1;
        let report = validate_config(&cfg);
        assert!(report.contains("N_a exceeds N_s"), "{report}");
    }

    #[test]
    fn zero_efficiency_rejected() {
        let mut cfg = SystemConfig::ci();
        cfg.eff_ap = 0.0;
        let before = cfg.clone();
        let report = validate_config(&cfg);
        assert!(report.contains("amplifier efficiency must be in (0,1]"));
        assert_eq!(cfg, before);
    }

    #[test]
    fn nonpositive_power_rejected() {
        let mut cfg = SystemConfig::ci();
        cfg.noise_ris = 0.0;
        cfg.rate_threshold = -1.0;
        cfg.a_max = 0.5;
        let report = validate_config(&cfg);
        assert_eq!(report.violations.len(), 3, "{report}");
    }

    #[test]
    fn ap_grid_quarter_cells() {
        let mut cfg = SystemConfig::paper();
        cfg.area_side = 200.0;
        let mut rng = crate::RandomSource::seed_from_u64(1);
        let g = place_nodes(&cfg, &mut rng);
        let expect = [(50.0, 50.0), (50.0, 150.0), (150.0, 50.0), (150.0, 150.0)];
        for (p, e) in g.ap_positions.iter().zip(expect) {
            assert_eq!((p.x, p.y), e);
        }
        assert_eq!(g.ris_positions, vec![Point::new(100.0, 0.0), Point::new(100.0, 200.0)]);
    }

    #[test]
    fn placement_is_deterministic() {
        let cfg = SystemConfig::ci();
        let a = place_nodes(&cfg, &mut crate::RandomSource::seed_from_u64(9));
        let b = place_nodes(&cfg, &mut crate::RandomSource::seed_from_u64(9));
        assert_eq!(a, b);
        for p in a.user_positions.iter().chain(&a.ris_positions) {
            assert!((0.0..=cfg.area_side).contains(&p.x) && (0.0..=cfg.area_side).contains(&p.y));
        }
    }

    #[test]
    fn user_mean_position() {
        let mut cfg = SystemConfig::ci();
        cfg.num_users = 10_000;
        let g = place_nodes(&cfg, &mut crate::RandomSource::seed_from_u64(3));
        let n = g.user_positions.len() as f64;
        let mx = g.user_positions.iter().map(|p| p.x).sum::<f64>() / n;
        let my = g.user_positions.iter().map(|p| p.y).sum::<f64>() / n;
        // std of the mean is 200/sqrt(12 * 1e4) ~ 0.58 m per axis
        assert!(Point::new(mx, my).distance(&Point::new(100.0, 100.0)) < 5.0);
    }

    #[test]
    fn selection_mask_layouts() {
        let m = SelectionMask::first_per_ris(2, 4, 1);
        assert_eq!(
            m.active,
            vec![true, false, false, false, true, false, false, false]
        );
        assert!(SelectionMask::first_per_ris(2, 4, 4).active.iter().all(|&a| a));
        assert!(SelectionMask::first_per_ris(2, 4, 0).active.iter().all(|&a| !a));
        let cfg = SystemConfig::paper();
        let mask = build_selection_mask(&cfg);
        assert_eq!(mask.count_active(), cfg.num_ris * cfg.active_per_ris);
        assert_eq!(mask.active_in(1).collect::<Vec<_>>(), vec![80, 81, 82]);
    }

    #[test]
    fn config_file_units_and_unknown_keys() {
        let file = ConfigFile::parse(
            "num_aps = 3\np_max_ap_dbm = 30.0\nrician_factor_db = 0.0\nrate_threshold_db = 0.0\n",
        )
        .unwrap();
        let cfg = file.apply(&SystemConfig::ci());
        assert_eq!(cfg.num_aps, 3);
        assert!((cfg.p_max_ap - 1.0).abs() < 1e-12);
        assert!((cfg.rician_factor - 1.0).abs() < 1e-12);
        assert!((cfg.rate_threshold - 1.0).abs() < 1e-12);
        assert!(ConfigFile::parse("num_apz = 3\n").is_err());
    }
}

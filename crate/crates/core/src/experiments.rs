//! Monte-Carlo campaigns: parameter sweeps, convergence traces and CSV
//! summaries.
//!
//! Every trial derives its seeds from the master seed, so output depends only
//! on the spec and never on thread scheduling. Placement and channels depend
//! on the trial index alone, which pairs realizations across modes and
//! swept values.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::driver::{run_trial, BaselineMode, DriverError, RunOutcome};
use crate::scenario::{validate_config, SystemConfig};
use crate::dbm_to_watts;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error("no data rows")]
    Empty,
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Per-AP transmit budget in dBm.
    ApPowerDbm,
    /// Elements per RIS.
    RisElements,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::ApPowerDbm => "ap_power_dbm",
            SweepParam::RisElements => "ris_elements",
        }
    }

    /// `base` with the swept parameter set to `value`.
    pub fn apply(self, base: &SystemConfig, value: f64) -> SystemConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::ApPowerDbm => cfg.p_max_ap = dbm_to_watts(value),
            SweepParam::RisElements => {
                cfg.elements_per_ris = value as usize;
                cfg.active_per_ris = cfg.active_per_ris.min(cfg.elements_per_ris);
            }
        }
        cfg
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ap_power_dbm" => Ok(SweepParam::ApPowerDbm),
            "ris_elements" => Ok(SweepParam::RisElements),
            _ => Err(format!("unknown sweep parameter '{s}' (expected ap_power_dbm or ris_elements)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub modes: Vec<BaselineMode>,
    pub trials: usize,
    pub base: SystemConfig,
    pub master_seed: u64,
    /// Worker threads; `None` uses rayon's default.
    pub workers: Option<usize>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.values.is_empty() {
            return Err(ExperimentError::InvalidSpec("empty value list".into()));
        }
        if self.modes.is_empty() {
            return Err(ExperimentError::InvalidSpec("empty mode list".into()));
        }
        if self.trials == 0 {
            return Err(ExperimentError::InvalidSpec("trials must be at least 1".into()));
        }
        for &v in &self.values {
            if !v.is_finite() {
                return Err(ExperimentError::InvalidSpec(format!("non-finite value {v}")));
            }
            if self.param == SweepParam::RisElements && (v < 1.0 || v.fract() != 0.0) {
                return Err(ExperimentError::InvalidSpec(format!("ris_elements must be a positive integer, got {v}")));
            }
            let report = validate_config(&self.param.apply(&self.base, v));
            if !report.is_ok() {
                return Err(ExperimentError::InvalidSpec(format!("{} = {v}: {report}", self.param)));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer folded over `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Placement and channel seed of a trial.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, &[trial as u64])
}

/// Algorithm seed (random initial phases) of one sweep cell.
pub fn algorithm_seed(trial_seed: u64, value_idx: usize, mode_idx: usize) -> u64 {
    derive_seed(trial_seed, &[value_idx as u64, mode_idx as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Converged,
    MaxIters,
    Infeasible,
    SolverError,
}

impl TrialStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrialStatus::Converged => "converged",
            TrialStatus::MaxIters => "max_iters",
            TrialStatus::Infeasible => "infeasible",
            TrialStatus::SolverError => "solver_error",
        }
    }

    /// Whether the trial produced a usable operating point.
    pub fn has_result(self) -> bool {
        matches!(self, TrialStatus::Converged | TrialStatus::MaxIters)
    }
}

impl FromStr for TrialStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            TrialStatus::Converged,
            TrialStatus::MaxIters,
            TrialStatus::Infeasible,
            TrialStatus::SolverError,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| format!("unknown status '{s}'"))
    }
}

fn status_of(result: &Result<RunOutcome, DriverError>) -> TrialStatus {
    match result {
        Ok(out) if out.trace.converged => TrialStatus::Converged,
        Ok(_) => TrialStatus::MaxIters,
        Err(DriverError::InfeasibleTrial { .. }) => TrialStatus::Infeasible,
        Err(_) => TrialStatus::SolverError,
    }
}

/// Final operating point of a trial that produced one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub eta: f64,
    pub sum_rate: f64,
    pub p_ap_total: f64,
    pub p_ris_total: f64,
    pub p_circuit: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep_param: String,
    pub value: f64,
    pub mode: BaselineMode,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub iters: usize,
    pub metrics: Option<TrialMetrics>,
}

fn sweep_row(
    spec: &SweepSpec,
    value_idx: usize,
    mode_idx: usize,
    trial: usize,
) -> SweepRow {
    let value = spec.values[value_idx];
    let mode = spec.modes[mode_idx];
    let cfg = spec.param.apply(&spec.base, value);
    let seed = trial_seed(spec.master_seed, trial);
    let result = run_trial(&cfg, mode, seed, algorithm_seed(seed, value_idx, mode_idx));
    let status = status_of(&result);
    if let Err(e) = &result {
        log::warn!("{}={value} {mode} trial {trial}: {e}", spec.param);
    }
    let (iters, metrics) = match result {
        Ok(out) => {
            let last = out.trace.entries.last().unwrap_or(&out.trace.initial);
            let metrics = TrialMetrics {
                eta: last.eta,
                sum_rate: last.sum_rate,
                p_ap_total: last.power.ap_total(),
                p_ris_total: last.power.ris_total(),
                p_circuit: last.power.circuit,
                rates: last.rates.clone(),
            };
            (out.trace.entries.len(), Some(metrics))
        }
        Err(_) => (0, None),
    };
    SweepRow {
        sweep_param: spec.param.name().to_string(),
        value,
        mode,
        trial,
        seed,
        status,
        iters,
        metrics,
    }
}

fn in_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, ExperimentError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?.install(job))
}

pub const SWEEP_HEADER: [&str; 12] = [
    "sweep_param",
    "value",
    "mode",
    "trial",
    "seed",
    "status",
    "iters",
    "eta",
    "sum_rate",
    "p_ap_total",
    "p_ris_total",
    "p_circuit",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the sweep CSV: the fixed columns followed by `rate_1..rate_K`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], num_users: usize, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = SWEEP_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend((1..=num_users).map(|k| format!("rate_{k}")));
    w.write_record(&header)?;
    for row in rows {
        let m = row.metrics.as_ref();
        let mut rec = vec![
            row.sweep_param.clone(),
            row.value.to_string(),
            row.mode.to_string(),
            row.trial.to_string(),
            row.seed.to_string(),
            row.status.name().to_string(),
            row.iters.to_string(),
            opt(m.map(|m| m.eta)),
            opt(m.map(|m| m.sum_rate)),
            opt(m.map(|m| m.p_ap_total)),
            opt(m.map(|m| m.p_ris_total)),
            opt(m.map(|m| m.p_circuit)),
        ];
        rec.extend((0..num_users).map(|k| opt(m.and_then(|m| m.rates.get(k).copied()))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (value, mode, trial) cell; rows come back in value, mode,
/// trial order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, ExperimentError> {
    spec.validate()?;
    let cells: Vec<(usize, usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.modes.len()).flat_map(move |m| (0..spec.trials).map(move |t| (v, m, t))))
        .collect();
    in_pool(spec.workers, || {
        cells.par_iter().map(|&(v, m, t)| sweep_row(spec, v, m, t)).collect()
    })
}

/// [`run_sweep`] followed by [`write_sweep_csv`].
pub fn run_sweep_to<W: Write>(spec: &SweepSpec, out: W) -> Result<Vec<SweepRow>, ExperimentError> {
    let rows = run_sweep(spec)?;
    write_sweep_csv(&rows, spec.base.num_users, out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub mode: BaselineMode,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    /// 0 is the starting point.
    pub iter: usize,
    pub eta: f64,
    pub sum_rate: f64,
    pub p_total: f64,
    pub max_violation: f64,
}

/// Per-iteration traces, one row per iteration (including the starting
/// point) per trial. Trials without a result contribute no rows.
pub fn run_convergence(
    cfg: &SystemConfig,
    modes: &[BaselineMode],
    trials: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<Vec<ConvergenceRow>, ExperimentError> {
    if modes.is_empty() || trials == 0 {
        return Err(ExperimentError::InvalidSpec("need at least one mode and one trial".into()));
    }
    let report = validate_config(cfg);
    if !report.is_ok() {
        return Err(ExperimentError::InvalidSpec(report.to_string()));
    }
    let cells: Vec<(usize, usize)> = (0..modes.len()).flat_map(|m| (0..trials).map(move |t| (m, t))).collect();
    let per_cell: Vec<Vec<ConvergenceRow>> = in_pool(workers, || {
        cells
            .par_iter()
            .map(|&(m, t)| {
                let mode = modes[m];
                let seed = trial_seed(master_seed, t);
                let result = run_trial(cfg, mode, seed, algorithm_seed(seed, 0, m));
                let status = status_of(&result);
                match result {
                    Ok(out) => std::iter::once(&out.trace.initial)
                        .chain(&out.trace.entries)
                        .map(|e| ConvergenceRow {
                            mode,
                            trial: t,
                            seed,
                            status,
                            iter: e.iter,
                            eta: e.eta,
                            sum_rate: e.sum_rate,
                            p_total: e.power.total,
                            max_violation: e.max_violation,
                        })
                        .collect(),
                    Err(e) => {
                        log::warn!("{mode} trial {t}: {e}");
                        Vec::new()
                    }
                }
            })
            .collect()
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "trial", "seed", "status", "iter", "eta", "sum_rate", "p_total", "max_violation"])?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.status.name().to_string(),
            r.iter.to_string(),
            r.eta.to_string(),
            r.sum_rate.to_string(),
            r.p_total.to_string(),
            r.max_violation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outer iterations each trial needed, in (mode, trial) order.
pub fn iterations_per_trial(rows: &[ConvergenceRow]) -> Vec<(BaselineMode, usize, usize)> {
    let mut out: Vec<(BaselineMode, usize, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((m, t, n)) if *m == r.mode && *t == r.trial => *n = (*n).max(r.iter),
            _ => out.push((r.mode, r.trial, r.iter)),
        }
    }
    out
}

/// Mean and standard error of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Self { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_param: String,
    pub value: f64,
    pub mode: String,
    /// Trials with a result.
    pub trials: usize,
    pub infeasible: usize,
    pub eta: Option<Estimate>,
    pub sum_rate: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn get(&self, value: f64, mode: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.value == value && r.mode == mode)
    }

    /// Ratio of mean sum rate (`eta == false`) or mean EE (`eta == true`)
    /// between two modes at one value.
    pub fn ratio(&self, value: f64, num: &str, den: &str, eta: bool) -> Option<f64> {
        let pick = |r: &SummaryRow| if eta { r.eta } else { r.sum_rate };
        let a = pick(self.get(value, num)?)?;
        let b = pick(self.get(value, den)?)?;
        Some(a.mean / b.mean)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sweep_param",
            "value",
            "mode",
            "trials",
            "infeasible",
            "eta_mean",
            "eta_stderr",
            "sum_rate_mean",
            "sum_rate_stderr",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.sweep_param.clone(),
                r.value.to_string(),
                r.mode.clone(),
                r.trials.to_string(),
                r.infeasible.to_string(),
                opt(r.eta.map(|e| e.mean)),
                opt(r.eta.map(|e| e.stderr)),
                opt(r.sum_rate.map(|e| e.mean)),
                opt(r.sum_rate.map(|e| e.stderr)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups a sweep CSV by (parameter, value, mode) in order of first
/// appearance.
pub fn summarize<R: Read>(input: R) -> Result<Summary, ExperimentError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ExperimentError::Parse(format!("missing column '{name}'")))
    };
    let (c_param, c_value, c_mode, c_status, c_eta, c_rate) = (
        col("sweep_param")?,
        col("value")?,
        col("mode")?,
        col("status")?,
        col("eta")?,
        col("sum_rate")?,
    );
    type Key = (String, u64, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: HashMap<Key, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| ExperimentError::Parse(format!("row {}: bad {what}", line + 1));
        let value: f64 = rec[c_value].parse().map_err(|_| bad("value"))?;
        let status: TrialStatus = rec[c_status].parse().map_err(|_| bad("status"))?;
        let key = (rec[c_param].to_string(), value.to_bits(), rec[c_mode].to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = groups.entry(key).or_default();
        if status.has_result() {
            entry.0.push(rec[c_eta].parse().map_err(|_| bad("eta"))?);
            entry.1.push(rec[c_rate].parse().map_err(|_| bad("sum_rate"))?);
        } else {
            entry.2 += 1;
        }
    }
    if order.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let (etas, rates, infeasible) = &groups[&key];
            SummaryRow {
                sweep_param: key.0,
                value: f64::from_bits(key.1),
                mode: key.2,
                trials: etas.len(),
                infeasible: *infeasible,
                eta: Estimate::from_samples(etas),
                sum_rate: Estimate::from_samples(rates),
            }
        })
        .collect();
    Ok(Summary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(trial_seed(7, 3), trial_seed(7, 3));
        assert_ne!(trial_seed(7, 3), trial_seed(7, 4));
        assert_ne!(trial_seed(7, 3), trial_seed(8, 3));
        assert_ne!(algorithm_seed(1, 0, 1), algorithm_seed(1, 1, 0));
    }

    #[test]
    fn estimate_single_and_pair() {
        let e = Estimate::from_samples(&[2.5]).unwrap();
        assert_eq!((e.mean, e.stderr), (2.5, 0.0));
        let e = Estimate::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert!((e.stderr - 1.0).abs() < 1e-15);
        assert!(Estimate::from_samples(&[]).is_none());
    }

    #[test]
    fn summarize_single_row_and_empty() {
        let csv = "sweep_param,value,mode,trial,seed,status,iters,eta,sum_rate,p_ap_total,p_ris_total,p_circuit,rate_1\n\
                   ap_power_dbm,0,proposed,0,1,converged,4,12.5,3,0.1,0,0.2,3\n";
        let s = summarize(csv.as_bytes()).unwrap();
        assert_eq!(s.rows.len(), 1);
        let r = &s.rows[0];
        assert_eq!(r.eta, Some(Estimate { mean: 12.5, stderr: 0.0 }));
        assert_eq!(r.trials, 1);
        let header_only = csv.lines().next().unwrap();
        assert!(matches!(summarize(header_only.as_bytes()), Err(ExperimentError::Empty)));
    }

    #[test]
    fn infeasible_rows_are_counted_not_averaged() {
        let csv = "sweep_param,value,mode,trial,seed,status,iters,eta,sum_rate\n\
                   x,1,a,0,1,converged,3,10,2\n\
                   x,1,a,1,2,infeasible,0,,\n\
                   x,1,b,0,1,max_iters,30,5,4\n";
        let s = summarize(csv.as_bytes()).unwrap();
        let a = s.get(1.0, "a").unwrap();
        assert_eq!((a.trials, a.infeasible), (1, 1));
        assert_eq!(s.ratio(1.0, "a", "b", true), Some(2.0));
        assert_eq!(s.ratio(1.0, "a", "b", false), Some(0.5));
    }

    #[test]
    fn spec_validation() {
        let spec = SweepSpec {
            param: SweepParam::RisElements,
            values: vec![8.0],
            modes: vec![BaselineMode::Proposed],
            trials: 1,
            base: SystemConfig::ci(),
            master_seed: 0,
            workers: None,
        };
        assert!(spec.validate().is_ok());
        assert!(SweepSpec { values: vec![], ..spec.clone() }.validate().is_err());
        assert!(SweepSpec { trials: 0, ..spec.clone() }.validate().is_err());
        assert!(SweepSpec { values: vec![2.5], ..spec }.validate().is_err());
    }
}

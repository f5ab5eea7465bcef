use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cellfree_ris::driver::{dinkelbach_residual, run_trial, BaselineMode};
use cellfree_ris::experiments::{
    iterations_per_trial, run_convergence, run_sweep, summarize, write_convergence_csv, write_sweep_csv,
    SweepParam, SweepSpec,
};
use cellfree_ris::scenario::{load_config, SystemConfig};

#[derive(Parser)]
#[command(name = "cellfree-ris", version, about = "Energy-efficiency optimization for hybrid-RIS cell-free downlinks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Ci,
    Paper,
}

#[derive(Args)]
struct Common {
    /// TOML file overriding keys of the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ci")]
    profile: Profile,
    /// Master seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<SystemConfig> {
        let base = match self.profile {
            Profile::Ci => SystemConfig::ci(),
            Profile::Paper => SystemConfig::paper(),
        };
        let mut cfg = match &self.config {
            Some(path) => load_config(path, &base).with_context(|| format!("loading {}", path.display()))?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn parse_modes(list: &str) -> Result<Vec<BaselineMode>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<BaselineMode>().map_err(anyhow::Error::msg))
        .collect()
}

fn parse_values(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad value '{s}'")))
        .collect()
}

const DEFAULT_MODES: &str = "proposed,active_ris,passive_ris,random_theta,all_ap";

#[derive(Subcommand)]
enum Command {
    /// Optimize a single trial and print its iteration trace.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "proposed")]
        mode: String,
    },
    /// Monte-Carlo sweep over one parameter; writes one CSV row per trial.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// ap_power_dbm or ris_elements.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values of the swept parameter.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = DEFAULT_MODES)]
        modes: String,
        /// Convenience alias for a single-mode sweep.
        #[arg(long, conflicts_with = "modes")]
        mode: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Per-iteration energy-efficiency traces.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "proposed")]
        modes: String,
        #[arg(long, conflicts_with = "modes")]
        mode: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Mean and standard error per (value, mode) of a sweep CSV.
    Summarize {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_single(common: &Common, mode: &str) -> Result<()> {
    let cfg = common.config()?;
    let mode: BaselineMode = mode.parse().map_err(anyhow::Error::msg)?;
    let out = run_trial(&cfg, mode, cfg.seed, cfg.seed)?;
    let mut w = common.output()?;
    writeln!(w, "iter eta sum_rate p_total f1 max_violation wall_s")?;
    for e in std::iter::once(&out.trace.initial).chain(&out.trace.entries) {
        writeln!(
            w,
            "{} {:.6e} {:.6} {:.6e} {:.3e} {:.3e} {:.3}",
            e.iter, e.eta, e.sum_rate, e.power.total, e.f1, e.max_violation, e.wall_time
        )?;
    }
    writeln!(
        w,
        "# mode={mode} converged={} dinkelbach_residual={:.3e}",
        out.trace.converged,
        dinkelbach_residual(&out.trace)
    )?;
    w.flush()?;
    Ok(())
}

fn summarize_file(input: &Path, out: Option<&PathBuf>) -> Result<()> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let summary = summarize(file)?;
    match out {
        Some(path) => summary.write_csv(File::create(path)?)?,
        None => summary.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { common, mode } => run_single(&common, &mode),
        Command::Sweep {
            common,
            param,
            values,
            modes,
            mode,
            trials,
        } => {
            let base = common.config()?;
            let spec = SweepSpec {
                param,
                values: parse_values(&values)?,
                modes: parse_modes(mode.as_deref().unwrap_or(&modes))?,
                trials,
                master_seed: base.seed,
                workers: common.workers,
                base,
            };
            let rows = run_sweep(&spec)?;
            write_sweep_csv(&rows, spec.base.num_users, common.output()?)?;
            Ok(())
        }
        Command::Convergence {
            common,
            modes,
            mode,
            trials,
        } => {
            let cfg = common.config()?;
            let modes = parse_modes(mode.as_deref().unwrap_or(&modes))?;
            let rows = run_convergence(&cfg, &modes, trials, cfg.seed, common.workers)?;
            if rows.is_empty() {
                bail!("no trial produced a trace");
            }
            let mut iters: Vec<usize> = iterations_per_trial(&rows).into_iter().map(|(_, _, n)| n).collect();
            iters.sort_unstable();
            log::info!("median outer iterations: {}", iters[iters.len() / 2]);
            write_convergence_csv(&rows, common.output()?)?;
            Ok(())
        }
        Command::Summarize { input, out } => summarize_file(&input, out.as_ref()),
    }
}

//! Acceptance suite. Every test prints one `PASS`/`FAIL` line; run with
//! `cargo test --release --test acceptance -- --nocapture --include-ignored`
//! to see all of them (the full-scale check is ignored by default).

use std::f64::consts::PI;

use cellfree_ris::channel::{synthesize_channels_from_seed, ChannelSet};
use cellfree_ris::driver::{dinkelbach_residual, optimize, run_trial, BaselineMode, Problem};
use cellfree_ris::experiments::{
    algorithm_seed, iterations_per_trial, run_convergence, run_sweep_to, summarize, trial_seed, Summary, SweepParam,
    SweepSpec,
};
use cellfree_ris::metrics::{
    ap_tx_power, circuit_power, ris_tx_power, total_power, Beamformer, RisState, UserTerms,
};
use cellfree_ris::scenario::{build_selection_mask, place_nodes, SelectionMask, SystemConfig};
use cellfree_ris::solver::{sinr_constraints_theta, sinr_constraints_w, sinr_gap_theta, sinr_gap_w};
use cellfree_ris::transforms::{
    build_quadratic_forms, eval_f2, eval_f3, eval_f4, kron_power_operators, update_epsilon, update_rho, update_y,
    SlackState,
};
use cellfree_ris::{CMatrix, CVector, Complex64, RandomSource};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn cgauss<R: Rng>(rng: &mut R, scale: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * scale
}

struct Instance {
    cfg: SystemConfig,
    ch: ChannelSet,
    bf: Beamformer,
    ris: RisState,
}

/// Desk-scale channels with an arbitrary (not optimized) operating point.
fn random_instance(seed: u64) -> Instance {
    let cfg = SystemConfig::ci();
    let mut rng = RandomSource::seed_from_u64(seed);
    let geometry = place_nodes(&cfg, &mut rng);
    let ch = synthesize_channels_from_seed(&cfg, &geometry, rng.random());
    let mask = build_selection_mask(&cfg);
    let w = CMatrix::from_fn(cfg.total_antennas(), cfg.num_users, |_, _| cgauss(&mut rng, 0.05));
    let coeffs = CVector::from_fn(mask.len(), |n, _| {
        let amp = if mask.is_active(n) { rng.random::<f64>() * cfg.a_max } else { 1.0 };
        Complex64::from_polar(amp, rng.random::<f64>() * 2.0 * PI)
    });
    let bf = Beamformer::new(w, cfg.antennas_per_ap);
    Instance {
        ris: RisState::new(coeffs, mask),
        cfg,
        ch,
        bf,
    }
}

/// `h_k^H` as a row, built densely from `d_k^H + theta^H diag(f_k^H) G`.
fn dense_row(ch: &ChannelSet, theta: &CVector, k: usize) -> CMatrix {
    let n = ch.total_elements();
    let theta_h = theta.adjoint();
    let f_diag = CMatrix::from_fn(n, n, |i, j| if i == j { ch.ris_user[(k, i)] } else { Complex64::new(0.0, 0.0) });
    let cascade = theta_h * f_diag * &ch.ap_ris;
    ch.direct.rows(k, 1).clone_owned() + CMatrix::from_row_slice(1, cascade.len(), cascade.as_slice())
}

fn dense_ris_power(ch: &ChannelSet, bf: &Beamformer, ris: &RisState, r: usize, cfg: &SystemConfig) -> f64 {
    let ns = ch.elements_per_ris;
    let psi = CMatrix::from_fn(ns, ns, |i, j| {
        let n = r * ns + i;
        if i == j && ris.mask.is_active(n) {
            ris.coeffs[n]
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let g_r = ch.ap_ris.rows(r * ns, ns);
    let x = &psi * g_r * &bf.w;
    let tx = (&x * x.adjoint()).trace().re;
    let noise = (&psi * psi.adjoint()).trace().re * cfg.noise_ris;
    (tx + noise) / cfg.eff_ris
}

#[test]
fn criterion_1_identity_oracles() {
    let (mut worst_kron, mut worst_q, mut worst_h, mut worst_f) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let Instance { cfg, ch, bf, ris } = random_instance(seed);
        let x = bf.vec();
        let ops = kron_power_operators(&ch, &ris, &cfg);
        let nt = cfg.antennas_per_ap;
        for l in 0..cfg.num_aps {
            let block = bf.w.rows(l * nt, nt);
            let trace = (block.adjoint() * block).trace().re / cfg.eff_ap;
            worst_kron = worst_kron.max(rel_err(ops.ap_power(l, &x), trace));
            worst_kron = worst_kron.max(rel_err(ap_tx_power(&bf, l, &cfg), trace));
        }
        for r in 0..cfg.num_ris {
            let trace = dense_ris_power(&ch, &bf, &ris, r, &cfg);
            worst_kron = worst_kron.max(rel_err(ops.ris_power(r, &x), trace));
            worst_kron = worst_kron.max(rel_err(ris_tx_power(&ch, &bf, &ris, r, &cfg), trace));
        }

        let forms = build_quadratic_forms(&ch, &bf, &ris.mask, &cfg);
        let theta = ris.theta();
        for k in 0..cfg.num_users {
            let row = dense_row(&ch, &theta, k);
            for j in 0..cfg.num_users {
                let direct = (&row * bf.w.column(j))[(0, 0)].norm_sqr();
                let q1 = forms.q1(k, j);
                let quad = (theta.adjoint() * &q1 * &theta)[(0, 0)].re
                    + 2.0 * theta.dotc(&forms.q2(k, j)).re
                    + forms.q3(k, j);
                worst_q = worst_q.max(rel_err(quad, direct));
            }
        }

        for r in 0..cfg.num_ris {
            let ns = ch.elements_per_ris;
            let gw = ch.ap_ris.rows(r * ns, ns) * &bf.w;
            let dense = (&gw * gw.adjoint()).map_diagonal(|z| z.re);
            let h_r = forms.h_r(r);
            for i in 0..ns {
                worst_h = worst_h.max(rel_err(h_r[i], dense[i]));
            }
            worst_h = worst_h.max(rel_err(forms.ris_power(r, &theta, &cfg), dense_ris_power(&ch, &bf, &ris, r, &cfg)));
        }

        // Slack taken at a different point so the check is not at a stationary point.
        let other = Beamformer::new(bf.w.map(|z| z * Complex64::new(0.6, 0.3)), cfg.antennas_per_ap);
        let slack = SlackState::updated(&ch, &other, &ris, &cfg);
        let f3 = eval_f3(&ch, &bf, &ris, &slack, &cfg);
        let f4 = eval_f4(&ch, &theta, &ris.mask, &bf, &slack, &cfg);
        worst_f = worst_f.max(rel_err(f4, f3));
    }
    let worst = worst_kron.max(worst_q).max(worst_h).max(worst_f);
    report(
        "criterion 1 (identity oracles, 100 seeds)",
        worst <= 1e-10,
        format!("max rel err: kron {worst_kron:.1e}, Q-forms {worst_q:.1e}, H_r {worst_h:.1e}, f4/f3 {worst_f:.1e} (tol 1e-10)"),
    )
}

#[test]
fn criterion_2_closed_form_stationarity() {
    const H: f64 = 1e-6;
    let (mut worst_eps, mut worst_rho) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let Instance { cfg, ch, bf, ris } = random_instance(1000 + seed);
        let y = update_y(&ch, &bf, &ris, &cfg);
        let eps = update_epsilon(&ch, &bf, &ris, &cfg);
        for i in 0..eps.len() {
            let (mut up, mut down) = (eps.clone(), eps.clone());
            up[i] += H;
            down[i] -= H;
            let g = (eval_f2(&ch, &bf, &ris, y, &up, &cfg) - eval_f2(&ch, &bf, &ris, y, &down, &cfg)) / (2.0 * H);
            worst_eps = worst_eps.max(g.abs());
        }

        let rho = update_rho(&ch, &bf, &ris, &eps, &cfg);
        let slack = SlackState {
            y_hat: y,
            eps_hat: eps,
            rho_hat: rho,
        };
        for i in 0..slack.rho_hat.len() {
            for dir in [Complex64::new(H, 0.0), Complex64::new(0.0, H)] {
                let (mut up, mut down) = (slack.clone(), slack.clone());
                up.rho_hat[i] += dir;
                down.rho_hat[i] -= dir;
                let g = (eval_f3(&ch, &bf, &ris, &up, &cfg) - eval_f3(&ch, &bf, &ris, &down, &cfg)) / (2.0 * H);
                worst_rho = worst_rho.max(g.abs());
            }
        }
    }
    report(
        "criterion 2 (closed-form stationarity, 50 instances)",
        worst_eps < 1e-6 && worst_rho < 1e-6,
        format!("max |d f2/d eps| {worst_eps:.1e}, max |d f3/d rho| {worst_rho:.1e} (tol 1e-6, step 1e-6)"),
    )
}

#[test]
fn criterion_3_sca_minorant() {
    let Instance { cfg, ch, bf, ris } = random_instance(77);
    let mut rng = RandomSource::seed_from_u64(78);
    let m = cfg.total_antennas();

    let cons = sinr_constraints_w(&ch, &ris, &bf, &cfg);
    let mut at_point = 0.0f64;
    let mut violations = 0;
    let mut probes = 0;
    let terms_scale = |b: &Beamformer| {
        let t = UserTerms::compute(&ch, b, &ris, &cfg);
        (0..cfg.num_users).map(|k| t.total_received(k)).fold(0.0, f64::max) * (1.0 + cfg.sinr_threshold())
    };
    for (k, c) in cons.iter().enumerate() {
        let scale = terms_scale(&bf);
        at_point = at_point.max((c.value(&bf.vec()) - sinr_gap_w(&ch, &ris, &bf, k, &cfg)).abs() / scale);
    }
    for i in 0..1000 {
        let step = 10f64.powi(i % 5 - 3) * 0.05;
        let w = CMatrix::from_fn(m, cfg.num_users, |a, b| bf.w[(a, b)] + cgauss(&mut rng, step));
        let probe = Beamformer::new(w, cfg.antennas_per_ap);
        let scale = terms_scale(&probe);
        for (k, c) in cons.iter().enumerate() {
            probes += 1;
            if c.value(&probe.vec()) < sinr_gap_w(&ch, &ris, &probe, k, &cfg) - 1e-12 * scale {
                violations += 1;
            }
        }
    }

    let forms = build_quadratic_forms(&ch, &bf, &ris.mask, &cfg);
    let theta = ris.theta();
    let cons = sinr_constraints_theta(&forms, &theta, &cfg);
    let theta_scale = |t: &CVector| {
        (0..cfg.num_users)
            .map(|k| (0..cfg.num_users).map(|j| forms.gain_quad(k, j, t)).sum::<f64>() + forms.noise_quad(k, t))
            .fold(0.0, f64::max)
            * (1.0 + cfg.sinr_threshold())
    };
    for (k, c) in cons.iter().enumerate() {
        at_point = at_point.max((c.value(&theta) - sinr_gap_theta(&forms, &theta, k, &cfg)).abs() / theta_scale(&theta));
    }
    for i in 0..1000 {
        let step = 10f64.powi(i % 5 - 3) * cfg.a_max;
        let probe = CVector::from_fn(theta.len(), |n, _| theta[n] + cgauss(&mut rng, step));
        let scale = theta_scale(&probe);
        for (k, c) in cons.iter().enumerate() {
            probes += 1;
            if c.value(&probe) < sinr_gap_theta(&forms, &probe, k, &cfg) - 1e-12 * scale {
                violations += 1;
            }
        }
    }
    report(
        "criterion 3 (SCA minorant)",
        at_point <= 1e-12 && violations == 0,
        format!("rel err at expansion point {at_point:.1e} (tol 1e-12), {violations} violations in {probes} probe evaluations"),
    )
}

fn ci_seeds(trials: usize) -> Vec<u64> {
    let cfg = SystemConfig::ci();
    (0..trials).map(|t| trial_seed(cfg.seed, t)).collect()
}

#[test]
fn criterion_4_monotone_ascent_and_fixed_point() {
    let cfg = SystemConfig::ci();
    let mut worst_drop = 0.0f64;
    let mut residuals = Vec::new();
    let mut unconverged = 0;
    for seed in ci_seeds(20) {
        let out = run_trial(&cfg, BaselineMode::Proposed, seed, algorithm_seed(seed, 0, 0)).expect("trial failed");
        let mut prev = out.trace.initial.eta;
        for e in &out.trace.entries {
            worst_drop = worst_drop.max(prev - e.eta);
            prev = e.eta;
        }
        if !out.trace.converged {
            unconverged += 1;
        }
        residuals.push(dinkelbach_residual(&out.trace));
    }
    let max_res = residuals.iter().cloned().fold(0.0, f64::max);
    let over = residuals.iter().filter(|&&r| r >= 1e-3).count();
    report(
        "criterion 4 (monotone ascent + Dinkelbach fixed point, 20 trials)",
        worst_drop <= 1e-6 && over == 0 && unconverged == 0,
        format!(
            "largest eta drop {worst_drop:.1e} (tol 1e-6); |f1| max {max_res:.2e}, {over}/20 at or above 1e-3; {unconverged}/20 hit the iteration cap"
        ),
    )
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    for _ in 0..200 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

#[test]
fn criterion_5_brute_force_equivalence() {
    let mut cfg = SystemConfig::ci();
    cfg.num_aps = 1;
    cfg.antennas_per_ap = 2;
    cfg.num_users = 1;
    cfg.num_ris = 1;
    cfg.elements_per_ris = 2;
    cfg.active_per_ris = 0;

    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let geometry = place_nodes(&cfg, &mut RandomSource::seed_from_u64(seed));
        let problem = Problem::build(&cfg, &geometry, BaselineMode::PassiveRis, seed);
        // Boost the reflected path so the phases matter as much as the direct link.
        let mut ch = problem.channels.clone();
        let cascade = (ch.ap_ris.norm() * ch.ris_user.norm()).max(f64::MIN_POSITIVE);
        ch.ris_user *= Complex64::new(ch.direct.norm() / cascade, 0.0);
        let problem = problem.with_channels(ch.clone());
        let out = optimize(&problem, &mut RandomSource::seed_from_u64(seed + 100)).expect("trial failed");

        let grid = 720;
        let mut best_gain = 0.0f64;
        for a in 0..grid {
            for b in 0..grid {
                let phases = [2.0 * PI * a as f64 / grid as f64, 2.0 * PI * b as f64 / grid as f64];
                let mut row = ch.direct.row(0).transpose();
                for (n, phi) in phases.iter().enumerate() {
                    let coeff = Complex64::from_polar(1.0, *phi) * ch.ris_user[(0, n)];
                    row += ch.ap_ris.row(n).transpose() * coeff;
                }
                best_gain = best_gain.max(row.norm_squared());
            }
        }
        let mask = SelectionMask::first_per_ris(1, 2, 0);
        let pc = circuit_power(1, 1, &mask, &cfg);
        let p_min = cfg.sinr_threshold() * cfg.noise_user / best_gain;
        let p_max = cfg.eff_ap * cfg.p_max_ap;
        let ee = |p: f64| (1.0 + best_gain * p / cfg.noise_user).log2() / (p / cfg.eff_ap + pc);
        let (_, oracle) = golden_max(ee, p_min.min(p_max), p_max);
        let got = out.trace.final_eta();
        let err = rel_err(got, oracle);
        worst = worst.max(err);
        details.push(format!("{got:.4}/{oracle:.4}"));
    }
    report(
        "criterion 5 (brute-force equivalence, 5 tiny instances)",
        worst <= 1e-3,
        format!("max rel gap {worst:.1e} (tol 1e-3); eta algorithm/oracle {}", details.join(" ")),
    )
}

fn sweep_summary(base: &SystemConfig, values: Vec<f64>, modes: Vec<BaselineMode>, trials: usize) -> Summary {
    let spec = SweepSpec {
        param: SweepParam::ApPowerDbm,
        values,
        modes,
        trials,
        base: base.clone(),
        master_seed: base.seed,
        workers: None,
    };
    let mut csv = Vec::new();
    run_sweep_to(&spec, &mut csv).expect("sweep failed");
    summarize(csv.as_slice()).expect("summary failed")
}

/// `a >= b` on means, allowing two combined standard errors.
fn at_least(s: &Summary, value: f64, a: &str, b: &str, eta: bool) -> (bool, String) {
    let pick = |m: &str| {
        let row = s.get(value, m).expect("missing mode");
        if eta { row.eta } else { row.sum_rate }.expect("no feasible trials")
    };
    let (x, y) = (pick(a), pick(b));
    let margin = 2.0 * (x.stderr.powi(2) + y.stderr.powi(2)).sqrt();
    (
        x.mean >= y.mean - margin,
        format!("{a} {:.3} vs {b} {:.3} (margin {margin:.3})", x.mean, y.mean),
    )
}

#[test]
fn criterion_6_trends() {
    let cfg = SystemConfig::ci();
    let p = 20.0;
    let s = sweep_summary(
        &cfg,
        vec![p],
        vec![BaselineMode::ActiveRis, BaselineMode::Proposed, BaselineMode::PassiveRis, BaselineMode::RandomTheta],
        20,
    );
    let mut ok = true;
    let mut lines = Vec::new();
    for (a, b, eta) in [
        ("active_ris", "proposed", false),
        ("proposed", "passive_ris", false),
        ("passive_ris", "random_theta", false),
        ("proposed", "active_ris", true),
    ] {
        let (good, text) = at_least(&s, p, a, b, eta);
        ok &= good;
        lines.push(format!("{}{} {text}", if eta { "EE " } else { "rate " }, if good { "ok" } else { "NO" }));
    }
    let ratio = s.ratio(p, "proposed", "passive_ris", true).unwrap();
    let within = (ratio - 1.0).abs() <= 0.10;
    ok &= within;
    lines.push(format!("EE proposed/passive {ratio:.3} {}", if within { "ok" } else { "NO" }));

    let values = vec![-10.0, 0.0, 10.0];
    let trend = sweep_summary(&cfg, values.clone(), vec![BaselineMode::Proposed], 20);
    let means: Vec<_> = values
        .iter()
        .map(|&v| trend.get(v, "proposed").and_then(|row| row.sum_rate))
        .collect();
    for (i, pair) in means.windows(2).enumerate() {
        let (lo, hi) = (values[i], values[i + 1]);
        match (pair[0], pair[1]) {
            (Some(a), Some(b)) => {
                let margin = 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                let good = b.mean > a.mean;
                ok &= good;
                lines.push(format!(
                    "rate {:.3} -> {:.3} (2se {margin:.3}) {}",
                    a.mean,
                    b.mean,
                    if good { "ok" } else { "NO" }
                ));
            }
            _ => {
                ok = false;
                let missing = if pair[0].is_none() { lo } else { hi };
                lines.push(format!("rate {lo} -> {hi} dBm NO (no feasible trials at {missing} dBm)"));
            }
        }
    }
    report("criterion 6 (desk-scale trends, 20 trials)", ok, lines.join("; "))
}

#[test]
fn criterion_7_convergence_speed() {
    let cfg = SystemConfig::ci();
    let rows = run_convergence(&cfg, &[BaselineMode::Proposed], 20, cfg.seed, None).expect("convergence run failed");
    let mut iters: Vec<usize> = iterations_per_trial(&rows).into_iter().map(|(_, _, n)| n).collect();
    iters.sort_unstable();
    let n = iters.len();
    let median = if n % 2 == 0 {
        0.5 * (iters[n / 2 - 1] + iters[n / 2]) as f64
    } else {
        iters[n / 2] as f64
    };
    report(
        "criterion 7 (convergence speed, CI profile)",
        n == 20 && median <= 10.0,
        format!("median outer iterations {median} (limit 10) over {n} trials; sorted {iters:?}"),
    )
}

#[test]
#[ignore = "full-size profile; run with --include-ignored"]
fn criterion_8_full_scale_ratios() {
    let cfg = SystemConfig::paper();
    let p = 20.0;
    let s = sweep_summary(
        &cfg,
        vec![p],
        vec![BaselineMode::Proposed, BaselineMode::ActiveRis, BaselineMode::PassiveRis],
        20,
    );
    let rate_active = s.ratio(p, "proposed", "active_ris", false).unwrap();
    let ee_active = s.ratio(p, "proposed", "active_ris", true).unwrap();
    let rate_passive = s.ratio(p, "proposed", "passive_ris", false).unwrap();
    let checks = [
        (0.80..=1.0).contains(&rate_active),
        ee_active >= 1.3,
        rate_passive >= 1.05,
    ];
    report(
        "criterion 8 (full-scale ratios)",
        checks.iter().all(|&c| c),
        format!(
            "rate hybrid/active {rate_active:.3} (want 0.80..1.0), EE hybrid/active {ee_active:.3} (want >= 1.3), rate hybrid/passive {rate_passive:.3} (want >= 1.05)"
        ),
    )
}

#[test]
fn criterion_9_determinism() {
    let cfg = SystemConfig::ci();
    let spec = |workers| SweepSpec {
        param: SweepParam::ApPowerDbm,
        values: vec![0.0, 20.0],
        modes: vec![BaselineMode::Proposed, BaselineMode::PassiveRis],
        trials: 3,
        base: cfg.clone(),
        master_seed: 42,
        workers: Some(workers),
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut third = Vec::new();
    run_sweep_to(&spec(4), &mut first).unwrap();
    run_sweep_to(&spec(4), &mut second).unwrap();
    run_sweep_to(&spec(1), &mut third).unwrap();
    let rows = first.iter().filter(|&&b| b == b'\n').count();
    report(
        "criterion 9 (determinism)",
        first == second && first == third && rows == 13,
        format!("{} bytes, {rows} lines; repeat identical {}, 1 vs 4 workers identical {}", first.len(), first == second, first == third),
    )
}

#[test]
fn total_power_matches_parts() {
    // Sanity check that the helpers used above agree with each other.
    let Instance { cfg, ch, bf, ris } = random_instance(5);
    let p = total_power(&ch, &bf, &ris, &cfg);
    let parts: f64 = (0..cfg.num_aps).map(|l| ap_tx_power(&bf, l, &cfg)).sum::<f64>()
        + (0..cfg.num_ris).map(|r| dense_ris_power(&ch, &bf, &ris, r, &cfg)).sum::<f64>()
        + circuit_power(cfg.num_aps, cfg.num_users, &ris.mask, &cfg);
    assert!(rel_err(p.total, parts) < 1e-12);
}

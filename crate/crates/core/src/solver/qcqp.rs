//! Convex QCQP in complex variables.
//!
//! ```text
//! maximize    const + 2 Re(c^H x) - x^H M x
//! subject to  x^H P_i x + 2 Re(x^H q_i) + r_i <= 0
//!             ||x_S|| <= u_S          for disjoint index groups S
//! ```
//!
//! Complex vectors are treated as real vectors of twice the length with the
//! inner product `Re(a^H b)`; under that identification the gradient of
//! `x^H P x` is `2 P x` and the gradient of `Re(q^H x)` is `q`.
//!
//! Norm-ball groups (per-coordinate magnitude bounds, per-AP power balls) are
//! handled by exact projection. Quadratic constraints go through an
//! augmented Lagrangian whose subproblems are solved by FISTA with
//! backtracking and adaptive restart. The problem is rescaled internally so
//! that the variable, objective and each constraint are O(1).

use std::io::Write;

use thiserror::Error;

use crate::operator::HermitianOp;
use crate::{CVector, Complex64};

/// Relative PSD tolerance: smallest eigenvalue at least `-1e-9 * ||op||`.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("{what} is not PSD (smallest eigenvalue bound {min_eig:e})")]
    NotPsd { what: String, min_eig: f64 },
    #[error("dimension mismatch in {0}")]
    Dimension(String),
    #[error("norm bound groups overlap at index {0}")]
    OverlappingBounds(usize),
    #[error("invalid norm bound radius {0}")]
    InvalidRadius(f64),
    #[error("non-finite data in {0}")]
    NonFinite(String),
}

/// `x^H P x + 2 Re(x^H q) + r <= 0`.
#[derive(Debug, Clone)]
pub struct QuadConstraint {
    pub op: HermitianOp,
    pub linear: CVector,
    pub offset: f64,
}

impl QuadConstraint {
    pub fn new(op: HermitianOp, linear: CVector, offset: f64) -> Self {
        Self { op, linear, offset }
    }

    pub fn value(&self, x: &CVector) -> f64 {
        self.op.quad(x) + 2.0 * x.dotc(&self.linear).re + self.offset
    }
}

/// `||x_S||_2 <= radius` over the index set `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBound {
    pub indices: Vec<usize>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct ConvexQcqp {
    dim: usize,
    pub constant: f64,
    pub linear: CVector,
    pub curvature: HermitianOp,
    pub constraints: Vec<QuadConstraint>,
    pub bounds: Vec<NormBound>,
    owner: Vec<Option<usize>>,
}

fn finite(v: &CVector) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

impl ConvexQcqp {
    pub fn new(constant: f64, linear: CVector, curvature: HermitianOp) -> Result<Self, SolverError> {
        let dim = linear.len();
        if curvature.dim() != dim {
            return Err(SolverError::Dimension("objective".into()));
        }
        if !constant.is_finite() || !finite(&linear) {
            return Err(SolverError::NonFinite("objective".into()));
        }
        curvature.verify_psd(PSD_TOLERANCE).map_err(|min_eig| SolverError::NotPsd {
            what: "objective curvature".into(),
            min_eig,
        })?;
        Ok(Self {
            dim,
            constant,
            linear,
            curvature,
            constraints: Vec::new(),
            bounds: Vec::new(),
            owner: vec![None; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add_constraint(&mut self, c: QuadConstraint) -> Result<(), SolverError> {
        let idx = self.constraints.len();
        if c.op.dim() != self.dim || c.linear.len() != self.dim {
            return Err(SolverError::Dimension(format!("constraint {idx}")));
        }
        if !c.offset.is_finite() || !finite(&c.linear) {
            return Err(SolverError::NonFinite(format!("constraint {idx}")));
        }
        c.op.verify_psd(PSD_TOLERANCE).map_err(|min_eig| SolverError::NotPsd {
            what: format!("constraint {idx}"),
            min_eig,
        })?;
        self.constraints.push(c);
        Ok(())
    }

    pub fn add_bound(&mut self, bound: NormBound) -> Result<(), SolverError> {
        if !(bound.radius >= 0.0) || !bound.radius.is_finite() {
            return Err(SolverError::InvalidRadius(bound.radius));
        }
        let group = self.bounds.len();
        for &i in &bound.indices {
            if i >= self.dim {
                return Err(SolverError::Dimension(format!("bound group {group}")));
            }
            if self.owner[i].is_some() {
                return Err(SolverError::OverlappingBounds(i));
            }
            self.owner[i] = Some(group);
        }
        self.bounds.push(bound);
        Ok(())
    }

    /// One `|x_n| <= u_n` bound per coordinate.
    pub fn add_magnitude_bounds(&mut self, upper: &[f64]) -> Result<(), SolverError> {
        if upper.len() != self.dim {
            return Err(SolverError::Dimension("magnitude bounds".into()));
        }
        for (n, &u) in upper.iter().enumerate() {
            self.add_bound(NormBound {
                indices: vec![n],
                radius: u,
            })?;
        }
        Ok(())
    }

    pub fn objective(&self, x: &CVector) -> f64 {
        self.constant + 2.0 * self.linear.dotc(x).re - self.curvature.quad(x)
    }

    /// Largest quadratic-constraint value and norm-bound excess, natural units.
    pub fn max_violation(&self, x: &CVector) -> f64 {
        let quad = self
            .constraints
            .iter()
            .map(|c| c.value(x))
            .fold(0.0f64, f64::max);
        let bounds = self
            .bounds
            .iter()
            .map(|b| group_norm(x, &b.indices) - b.radius)
            .fold(0.0f64, f64::max);
        quad.max(bounds)
    }

    pub fn project(&self, x: &CVector) -> CVector {
        let mut out = x.clone();
        project_groups(&mut out, &self.bounds, 1.0);
        out
    }
}

fn rscale(v: &CVector, s: f64) -> CVector {
    v * Complex64::new(s, 0.0)
}

fn group_norm(x: &CVector, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| x[i].norm_sqr()).sum::<f64>().sqrt()
}

fn project_groups(x: &mut CVector, bounds: &[NormBound], scale: f64) {
    for b in bounds {
        let radius = b.radius * scale;
        let norm = group_norm(x, &b.indices);
        if norm > radius {
            let f = if norm > 0.0 { radius / norm } else { 0.0 };
            for &i in &b.indices {
                x[i] *= f;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Max scaled constraint violation accepted as feasible.
    pub tol_feas: f64,
    /// Max scaled KKT residual accepted as optimal.
    pub tol_kkt: f64,
    /// Cap on inner (FISTA) iterations summed over all outer rounds.
    pub max_iters: usize,
    pub record_history: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-7,
            tol_kkt: 1e-6,
            max_iters: 5000,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

/// Residuals after one augmented-Lagrangian round.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverIterate {
    pub round: usize,
    pub inner_iters: usize,
    pub penalty: f64,
    pub objective: f64,
    pub feasibility: f64,
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: CVector,
    pub objective: f64,
    /// Max constraint violation, each constraint normalized by its own scale.
    pub feasibility: f64,
    /// KKT residual of the normalized problem.
    pub stationarity: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub history: Vec<SolverIterate>,
}

impl SolveResult {
    /// Writes one whitespace-separated record per round.
    pub fn write_history<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "round inner_iters penalty objective feasibility stationarity")?;
        for it in &self.history {
            writeln!(
                out,
                "{} {} {:e} {:e} {:e} {:e}",
                it.round, it.inner_iters, it.penalty, it.objective, it.feasibility, it.stationarity
            )?;
        }
        Ok(())
    }
}

/// Internally rescaled view of a problem: `x = scale * z`, objective divided
/// by `obj_scale`, constraint `i` divided by `con_scale[i]`.
struct Scaled<'a> {
    p: &'a ConvexQcqp,
    scale: f64,
    obj_scale: f64,
    con_scale: Vec<f64>,
    /// Tightening applied to every scaled constraint.
    shift: f64,
}

struct Eval {
    value: f64,
    grad: CVector,
    /// Scaled (shifted) constraint values.
    cons: Vec<f64>,
}

impl<'a> Scaled<'a> {
    fn new(p: &'a ConvexQcqp, x0: &CVector, shift: f64) -> Self {
        let mut scale = x0.norm();
        if !(scale > 0.0) {
            scale = p.bounds.iter().map(|b| b.radius).fold(0.0, f64::max);
        }
        if !(scale > 0.0) {
            scale = 1.0;
        }
        let obj_scale = (scale * scale * p.curvature.norm_bound())
            .max(scale * p.linear.norm())
            .max(f64::MIN_POSITIVE);
        let con_scale = p
            .constraints
            .iter()
            .map(|c| {
                (scale * scale * c.op.norm_bound())
                    .max(scale * c.linear.norm())
                    .max(c.offset.abs())
                    .max(f64::MIN_POSITIVE)
            })
            .collect();
        Self {
            p,
            scale,
            obj_scale,
            con_scale,
            shift,
        }
    }

    fn constraint_value(&self, i: usize, z: &CVector, pz: &CVector) -> f64 {
        let c = &self.p.constraints[i];
        let s = self.scale;
        (s * s * z.dotc(pz).re + 2.0 * s * z.dotc(&c.linear).re + c.offset) / self.con_scale[i]
    }

    /// Scaled objective to minimize: `(x^H M x - 2 Re(c^H x)) / obj_scale`.
    fn objective_grad(&self, z: &CVector) -> (f64, CVector) {
        let s = self.scale;
        let a_m = s * s / self.obj_scale;
        let a_c = s / self.obj_scale;
        let mz = self.p.curvature.apply(z);
        let value = a_m * z.dotc(&mz).re - 2.0 * a_c * self.p.linear.dotc(z).re;
        let grad = mz * Complex64::new(2.0 * a_m, 0.0) - &self.p.linear * Complex64::new(2.0 * a_c, 0.0);
        (value, grad)
    }

    /// Augmented Lagrangian value and gradient.
    fn eval(&self, z: &CVector, lam: &[f64], mu: f64) -> Eval {
        let (mut value, mut grad) = self.objective_grad(z);
        let s = self.scale;
        let mut cons = Vec::with_capacity(lam.len());
        for (i, c) in self.p.constraints.iter().enumerate() {
            let pz = c.op.apply(z);
            let g = self.constraint_value(i, z, &pz) + self.shift;
            cons.push(g);
            let t = lam[i] + mu * g;
            if t > 0.0 {
                value += (t * t - lam[i] * lam[i]) / (2.0 * mu);
                let f = t / self.con_scale[i];
                grad += pz * Complex64::new(2.0 * s * s * f, 0.0);
                grad += &c.linear * Complex64::new(2.0 * s * f, 0.0);
            } else {
                value -= lam[i] * lam[i] / (2.0 * mu);
            }
        }
        Eval { value, grad, cons }
    }

    /// Gradient of the ordinary Lagrangian with multipliers `lam`.
    fn lagrangian_grad(&self, z: &CVector, lam: &[f64]) -> (CVector, Vec<f64>) {
        let (_, mut grad) = self.objective_grad(z);
        let s = self.scale;
        let mut cons = Vec::with_capacity(lam.len());
        for (i, c) in self.p.constraints.iter().enumerate() {
            let pz = c.op.apply(z);
            cons.push(self.constraint_value(i, z, &pz));
            if lam[i] > 0.0 {
                let f = lam[i] / self.con_scale[i];
                grad += pz * Complex64::new(2.0 * s * s * f, 0.0);
                grad += &c.linear * Complex64::new(2.0 * s * f, 0.0);
            }
        }
        (grad, cons)
    }

    fn project(&self, z: &mut CVector) {
        project_groups(z, &self.p.bounds, 1.0 / self.scale);
    }

    /// Max(stationarity of the projected Lagrangian gradient, complementarity).
    fn kkt_residual(&self, z: &CVector, lam: &[f64]) -> f64 {
        let (grad, cons) = self.lagrangian_grad(z, lam);
        let mut step = z - &grad;
        self.project(&mut step);
        let stationarity = (z - step).norm();
        let compl = cons
            .iter()
            .zip(lam)
            .map(|(g, l)| (g + self.shift).abs() * l)
            .fold(0.0, f64::max);
        stationarity.max(compl)
    }

    /// Unshifted scaled violation of the quadratic constraints.
    fn violation(&self, z: &CVector) -> f64 {
        (0..self.p.constraints.len())
            .map(|i| {
                let pz = self.p.constraints[i].op.apply(z);
                self.constraint_value(i, z, &pz)
            })
            .fold(0.0, f64::max)
    }
}

/// FISTA with backtracking and gradient-based restart on the augmented
/// Lagrangian; returns the number of iterations used.
fn fista(
    sc: &Scaled<'_>,
    z: &mut CVector,
    lam: &[f64],
    mu: f64,
    lipschitz: &mut f64,
    tol: f64,
    budget: usize,
) -> usize {
    let mut y = z.clone();
    let mut t: f64 = 1.0;
    let mut iters = 0;
    while iters < budget {
        iters += 1;
        let ey = sc.eval(&y, lam, mu);
        let (z_new, step_norm) = loop {
            let mut cand = &y - &ey.grad * Complex64::new(1.0 / *lipschitz, 0.0);
            sc.project(&mut cand);
            let d = &cand - &y;
            let model = ey.value + ey.grad.dotc(&d).re + 0.5 * *lipschitz * d.norm_squared();
            let actual = sc.eval(&cand, lam, mu).value;
            if actual <= model + 1e-14 * model.abs().max(1.0) || *lipschitz > 1e30 {
                break (cand, d.norm());
            }
            *lipschitz *= 2.0;
        };
        let residual = *lipschitz * step_norm;
        let progress = &z_new - &*z;
        if ey.grad.dotc(&progress).re > 0.0 {
            t = 1.0;
            y = z_new.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z_new + progress * Complex64::new((t - 1.0) / t_next, 0.0);
            t = t_next;
        }
        *z = z_new;
        *lipschitz *= 0.9;
        if residual <= tol {
            break;
        }
    }
    iters
}

/// Solves the QCQP starting from `x0`.
///
/// If `x0` is feasible the returned objective is never below the objective
/// at `x0`.
pub fn solve_qcqp(p: &ConvexQcqp, x0: &CVector, settings: &SolverSettings) -> SolveResult {
    assert_eq!(x0.len(), p.dim(), "warm start dimension");
    let x0p = p.project(x0);
    let probe = Scaled::new(p, &x0p, 0.0);
    let v0 = probe.violation(&rscale(&x0p, 1.0 / probe.scale));
    let sc = Scaled::new(p, &x0p, settings.tol_feas);

    let m = p.constraints.len();
    let mut z = rscale(&x0p, 1.0 / sc.scale);
    let mut lam = vec![0.0; m];
    let mut mu = 10.0;
    let mut lipschitz = (2.0 * sc.scale * sc.scale * p.curvature.norm_bound() / sc.obj_scale).max(1e-8);
    let mut used = 0usize;
    let mut history = Vec::new();
    let mut prev_viol = f64::INFINITY;
    let mut best: Option<(f64, CVector)> = None;
    let mut kkt = f64::INFINITY;
    let mut round = 0;

    while used < settings.max_iters {
        let inner_tol = (1e-3 * 0.1f64.powi(round as i32)).max(0.1 * settings.tol_kkt);
        let budget = settings.max_iters - used;
        let n = fista(&sc, &mut z, &lam, mu, &mut lipschitz, inner_tol, budget);
        used += n;
        let cons = sc.eval(&z, &lam, mu).cons;
        let shifted_viol = cons.iter().cloned().fold(0.0, f64::max);
        for i in 0..m {
            lam[i] = (lam[i] + mu * cons[i]).max(0.0);
        }
        kkt = sc.kkt_residual(&z, &lam);
        let raw_viol = sc.violation(&z);
        let x = &z * Complex64::new(sc.scale, 0.0);
        let obj = p.objective(&x);
        if raw_viol <= settings.tol_feas && best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, z.clone()));
        }
        if settings.record_history {
            history.push(SolverIterate {
                round,
                inner_iters: n,
                penalty: mu,
                objective: obj,
                feasibility: raw_viol,
                stationarity: kkt,
            });
        }
        round += 1;
        if shifted_viol <= settings.tol_feas && kkt <= settings.tol_kkt {
            break;
        }
        if m == 0 && n < budget && kkt <= settings.tol_kkt {
            break;
        }
        if shifted_viol > 0.25 * prev_viol && mu < 1e10 {
            mu *= 10.0;
        }
        prev_viol = shifted_viol;
        if round > 200 {
            break;
        }
    }

    // fall back to the best feasible iterate if the last one is not feasible
    if sc.violation(&z) > settings.tol_feas {
        if let Some((_, zb)) = best {
            z = zb;
        }
    }
    let mut x = &z * Complex64::new(sc.scale, 0.0);

    // never degrade a feasible warm start
    if v0 <= settings.tol_feas {
        let target = v0.max(0.0);
        if probe.violation(&rscale(&x, 1.0 / probe.scale)) > target.max(settings.tol_feas) {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let cand = &x0p + (&x - &x0p) * Complex64::new(mid, 0.0);
                if probe.violation(&rscale(&cand, 1.0 / probe.scale)) <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            x = &x0p + (&x - &x0p) * Complex64::new(lo, 0.0);
        }
        if p.objective(&x) < p.objective(&x0p) {
            x = x0p.clone();
        }
        z = rscale(&x, 1.0 / sc.scale);
        kkt = sc.kkt_residual(&z, &lam);
    }

    let feasibility = sc.violation(&z);
    let status = if feasibility > settings.tol_feas {
        SolveStatus::Infeasible
    } else if kkt <= settings.tol_kkt {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIters
    };
    SolveResult {
        objective: p.objective(&x),
        x,
        feasibility,
        stationarity: kkt,
        iterations: used,
        status,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::OpTerm;
    use nalgebra::DVector;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn identity(n: usize) -> HermitianOp {
        HermitianOp::from_term(n, OpTerm::Diagonal(DVector::from_element(n, 1.0)))
    }

    #[test]
    fn unconstrained_closed_form() {
        let target = CVector::from_vec(vec![c(1.0, -2.0), c(0.5, 0.25), c(-3.0, 0.0)]);
        let p = ConvexQcqp::new(0.0, target.clone(), identity(3)).unwrap();
        let r = solve_qcqp(&p, &CVector::zeros(3), &SolverSettings::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((&r.x - &target).norm() < 1e-6, "{}", r.x);
    }

    #[test]
    fn scalar_boundary_projection() {
        let mut p = ConvexQcqp::new(0.0, CVector::from_element(1, c(1.0, 0.0)), identity(1)).unwrap();
        p.add_magnitude_bounds(&[0.5]).unwrap();
        let r = solve_qcqp(&p, &CVector::zeros(1), &SolverSettings::default());
        assert!((r.x[0] - c(0.5, 0.0)).norm() < 1e-9);
        assert_eq!(r.status, SolveStatus::Optimal);
    }

    #[test]
    fn ball_constraint_through_lagrangian() {
        // maximize 2 Re(c^H x) - ||x||^2 s.t. ||x||^2 <= 1 with ||c|| = 2 -> x = c / 2
        let cvec = CVector::from_vec(vec![c(2.0, 0.0), c(0.0, 0.0)]);
        let mut p = ConvexQcqp::new(0.0, cvec, identity(2)).unwrap();
        p.add_constraint(QuadConstraint::new(identity(2), CVector::zeros(2), -1.0)).unwrap();
        let r = solve_qcqp(&p, &CVector::zeros(2), &SolverSettings::default());
        assert!((r.x[0] - c(1.0, 0.0)).norm() < 1e-5, "{:?}", r);
        assert!(p.max_violation(&r.x) <= 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let neg = identity(2).scaled(-1.0);
        assert!(matches!(
            ConvexQcqp::new(0.0, CVector::zeros(2), neg),
            Err(SolverError::NotPsd { .. })
        ));
        let mut p = ConvexQcqp::new(0.0, CVector::zeros(2), identity(2)).unwrap();
        p.add_bound(NormBound { indices: vec![0, 1], radius: 1.0 }).unwrap();
        assert_eq!(
            p.add_bound(NormBound { indices: vec![1], radius: 1.0 }),
            Err(SolverError::OverlappingBounds(1))
        );
    }

    #[test]
    fn feasible_warm_start_is_never_degraded() {
        let cvec = CVector::from_vec(vec![c(1.0, 1.0), c(-1.0, 0.5)]);
        let mut p = ConvexQcqp::new(0.0, cvec, identity(2)).unwrap();
        p.add_constraint(QuadConstraint::new(identity(2), CVector::zeros(2), -0.5)).unwrap();
        let x0 = CVector::from_vec(vec![c(0.3, 0.3), c(-0.2, 0.1)]);
        let settings = SolverSettings {
            max_iters: 3,
            ..Default::default()
        };
        let r = solve_qcqp(&p, &x0, &settings);
        assert!(r.objective >= p.objective(&x0));
        assert!(p.max_violation(&r.x) <= 1e-12);
    }

    #[test]
    fn history_dump() {
        let p = ConvexQcqp::new(0.0, CVector::from_element(2, c(1.0, 0.0)), identity(2)).unwrap();
        let settings = SolverSettings {
            record_history: true,
            ..Default::default()
        };
        let r = solve_qcqp(&p, &CVector::zeros(2), &settings);
        let mut out = Vec::new();
        r.write_history(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), r.history.len() + 1);
    }
}

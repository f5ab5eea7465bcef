//! Structured Hermitian PSD operators applied without materialization.
//!
//! An operator is a sum of terms, each PSD by construction and each with a
//! cheap eigenvalue bound, so PSD verification and norm estimates never need
//! the full matrix. The `I (x) B` Kronecker structure of the beamforming
//! problem is a [`OpTerm::Repeated`] term.

use nalgebra::{DVector, SymmetricEigen};

use crate::{CMatrix, CVector, Complex64};

#[derive(Debug, Clone)]
pub enum OpTerm {
    /// Real diagonal over the full dimension.
    Diagonal(DVector<f64>),
    /// Dense Hermitian matrix over the full dimension.
    Dense(CMatrix),
    /// `sum_i w_i v_i v_i^H`.
    LowRank(Vec<(f64, CVector)>),
    /// Block-diagonal operator `sum_{j active} e_j e_j^T (x) block`; with every
    /// block active this is `I (x) block`.
    Repeated { block: CMatrix, active: Vec<bool> },
}

impl OpTerm {
    fn dim(&self) -> Option<usize> {
        match self {
            OpTerm::Diagonal(d) => Some(d.len()),
            OpTerm::Dense(m) => Some(m.nrows()),
            OpTerm::LowRank(v) => v.first().map(|(_, x)| x.len()),
            OpTerm::Repeated { block, active } => Some(block.nrows() * active.len()),
        }
    }

    fn apply_add(&self, x: &CVector, out: &mut CVector) {
        match self {
            OpTerm::Diagonal(d) => {
                for i in 0..x.len() {
                    out[i] += x[i] * d[i];
                }
            }
            OpTerm::Dense(m) => out.gemv(Complex64::new(1.0, 0.0), m, x, Complex64::new(1.0, 0.0)),
            OpTerm::LowRank(vs) => {
                for (w, v) in vs {
                    let coef = v.dotc(x) * *w;
                    out.axpy(coef, v, Complex64::new(1.0, 0.0));
                }
            }
            OpTerm::Repeated { block, active } => {
                let b = block.nrows();
                for (j, _) in active.iter().enumerate().filter(|(_, a)| **a) {
                    let y = block * x.rows(j * b, b);
                    let mut seg = out.rows_mut(j * b, b);
                    seg += y;
                }
            }
        }
    }

    /// (smallest eigenvalue lower bound, largest eigenvalue upper bound)
    fn eig_bounds(&self) -> (f64, f64) {
        match self {
            OpTerm::Diagonal(d) => (d.min().min(0.0), d.max().max(0.0)),
            OpTerm::Dense(m) => hermitian_eig_range(m),
            OpTerm::LowRank(vs) => vs.iter().fold((0.0, 0.0), |(lo, hi), (w, v)| {
                let e = w * v.norm_squared();
                (lo + e.min(0.0), hi + e.max(0.0))
            }),
            OpTerm::Repeated { block, active } => {
                if active.iter().any(|a| *a) {
                    let (lo, hi) = hermitian_eig_range(block);
                    (lo.min(0.0), hi.max(0.0))
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

fn hermitian_eig_range(m: &CMatrix) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    // symmetrize against round-off before the eigen solve
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Sum of [`OpTerm`]s acting on complex vectors of a fixed dimension.
#[derive(Debug, Clone)]
pub struct HermitianOp {
    dim: usize,
    terms: Vec<OpTerm>,
}

impl HermitianOp {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    pub fn from_term(dim: usize, term: OpTerm) -> Self {
        let mut op = Self::zero(dim);
        op.push(term);
        op
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[OpTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds a term. Panics on a dimension mismatch.
    pub fn push(&mut self, term: OpTerm) {
        if let Some(d) = term.dim() {
            assert_eq!(d, self.dim, "operator term dimension mismatch");
        }
        self.terms.push(term);
    }

    pub fn add(mut self, other: HermitianOp) -> Self {
        assert_eq!(self.dim, other.dim);
        self.terms.extend(other.terms);
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        let c = Complex64::new(s, 0.0);
        let terms = self
            .terms
            .iter()
            .map(|t| match t {
                OpTerm::Diagonal(d) => OpTerm::Diagonal(d * s),
                OpTerm::Dense(m) => OpTerm::Dense(m * c),
                OpTerm::LowRank(vs) => {
                    OpTerm::LowRank(vs.iter().map(|(w, v)| (w * s, v.clone())).collect())
                }
                OpTerm::Repeated { block, active } => OpTerm::Repeated {
                    block: block * c,
                    active: active.clone(),
                },
            })
            .collect();
        Self {
            dim: self.dim,
            terms,
        }
    }

    pub fn apply(&self, x: &CVector) -> CVector {
        let mut out = CVector::zeros(self.dim);
        for t in &self.terms {
            t.apply_add(x, &mut out);
        }
        out
    }

    /// `Re(x^H A x)`.
    pub fn quad(&self, x: &CVector) -> f64 {
        x.dotc(&self.apply(x)).re
    }

    /// Lower bound on the smallest eigenvalue (sum of per-term bounds).
    pub fn min_eig_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.eig_bounds().0).sum()
    }

    /// Upper bound on the spectral norm.
    pub fn norm_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let (lo, hi) = t.eig_bounds();
                hi.max(-lo)
            })
            .sum()
    }

    /// Accepts the operator if its smallest eigenvalue is at least
    /// `-rel_tol * norm`; returns the offending bound otherwise.
    pub fn verify_psd(&self, rel_tol: f64) -> Result<(), f64> {
        let lo = self.min_eig_bound();
        if lo >= -rel_tol * self.norm_bound() {
            Ok(())
        } else {
            Err(lo)
        }
    }

    /// Dense materialization, for tests and small oracles.
    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            let mut e = CVector::zeros(self.dim);
            e[j] = Complex64::new(1.0, 0.0);
            m.set_column(j, &self.apply(&e));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut impl Rng, n: usize) -> CVector {
        CVector::from_fn(n, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    #[test]
    fn structured_terms_match_dense() {
        let mut rng = crate::RandomSource::seed_from_u64(1);
        let b = 3;
        let a = rand_vec(&mut rng, b);
        let block = &a * a.adjoint();
        let v = rand_vec(&mut rng, 2 * b);
        let mut op = HermitianOp::zero(2 * b);
        op.push(OpTerm::Repeated {
            block: block.clone(),
            active: vec![false, true],
        });
        op.push(OpTerm::LowRank(vec![(2.0, v.clone())]));
        op.push(OpTerm::Diagonal(DVector::from_element(2 * b, 0.5)));

        let mut dense = CMatrix::identity(2 * b, 2 * b) * Complex64::new(0.5, 0.0);
        {
            let mut corner = dense.view_mut((b, b), (b, b));
            corner += &block;
        }
        dense += &v * v.adjoint() * Complex64::new(2.0, 0.0);
        assert!((op.to_dense() - &dense).norm() < 1e-12);

        let x = rand_vec(&mut rng, 2 * b);
        let q = x.dotc(&(&dense * &x)).re;
        assert!((op.quad(&x) - q).abs() < 1e-12);
        assert!(op.verify_psd(1e-9).is_ok());
        assert!(op.scaled(-1.0).verify_psd(1e-9).is_err());
        assert!(op.norm_bound() >= SymmetricEigen::new(dense).eigenvalues.max() - 1e-12);
    }

}

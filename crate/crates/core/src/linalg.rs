//! Dense linear-algebra helpers shared by the model and sampler modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorisation that reports which matrix failed.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry relative to the largest entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eigs = m.clone().symmetric_eigenvalues();
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Smallest and largest eigenvalue of `WᵀW` from the singular values of `W`.
/// Forming `WᵀW` first loses everything below `ε·σ_max²`.
pub fn gram_extreme_eigenvalues(w: &DMatrix<f64>) -> (f64, f64) {
    let sv = w.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = if w.nrows() < w.ncols() { 0.0 } else { sv.iter().cloned().fold(f64::INFINITY, f64::min) };
    (min * min, max * max)
}

/// `L⁻¹ B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| Error::numerical("singular triangular factor"))
}

/// `L⁻¹ v` for lower-triangular `L`.
pub fn solve_lower_vec(l: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    l.solve_lower_triangular(v)
        .ok_or_else(|| Error::numerical("singular triangular factor"))
}

/// Vector of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// A symmetric positive-definite matrix `P` together with a factor `F`,
/// `F Fᵀ = P`, used to inject correctly distributed noise `F ζ`.
#[derive(Debug, Clone)]
pub struct SpdOperator {
    matrix: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl SpdOperator {
    /// Factorises an SPD matrix directly.
    pub fn from_matrix(mut p: DMatrix<f64>, what: &str) -> Result<Self> {
        symmetrize(&mut p);
        let chol = cholesky(&p, what)?;
        Ok(Self { factor: chol.l(), matrix: p })
    }

    /// Builds `P = Q⁻¹` from a Cholesky factorisation of the precision
    /// `Q = L Lᵀ`. The noise factor is `L⁻ᵀ`, so `P` never has to be
    /// factorised itself.
    pub fn from_precision(precision: &DMatrix<f64>, what: &str) -> Result<Self> {
        let mut q = precision.clone();
        symmetrize(&mut q);
        let l = cholesky(&q, what)?.l();
        let n = l.nrows();
        let l_inv = solve_lower(&l, &DMatrix::identity(n, n))?;
        let factor = l_inv.transpose();
        let mut matrix = &factor * factor.transpose();
        symmetrize(&mut matrix);
        Ok(Self { matrix, factor })
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: DMatrix::identity(n, n), factor: DMatrix::identity(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }
}

//! Reduced-rank Gaussian-process covariances built from discrete Laplacian
//! eigenpairs and the squared-exponential spectral density.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_load, FemSystem};
use crate::linalg::{cholesky, relative_asymmetry, solve_lower, standard_normal, symmetrize};

/// Squared-exponential kernel `σ² exp(−r² / (2ℓ²))` on a `dim`-dimensional domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub amplitude: f64,
    pub length_scale: f64,
    pub dim: usize,
}

impl SeKernel {
    pub fn new(amplitude: f64, length_scale: f64, dim: usize) -> Result<Self> {
        if !(amplitude > 0.0) || !(length_scale > 0.0) {
            return Err(Error::invalid(format!(
                "kernel needs positive amplitude and length scale, got {amplitude}, {length_scale}"
            )));
        }
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("kernel dimension must be 1 or 2, got {dim}")));
        }
        Ok(Self { amplitude, length_scale, dim })
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.amplitude * (-0.5 * r * r / (self.length_scale * self.length_scale)).exp()
    }

    /// Default nugget scale for covariances built from this kernel.
    pub fn default_jitter(&self) -> f64 {
        1e-8 * self.amplitude
    }
}

/// Spectral density of the SE kernel, `σ² (2πℓ²)^{D/2} exp(−ω²ℓ²/2)`.
pub fn spectral_density_se(omega: f64, kernel: &SeKernel) -> f64 {
    let l2 = kernel.length_scale * kernel.length_scale;
    kernel.amplitude
        * (2.0 * std::f64::consts::PI * l2).powf(kernel.dim as f64 / 2.0)
        * (-0.5 * omega * omega * l2).exp()
}

/// Default number of eigenpairs kept by the reduced-rank approximation.
pub fn default_rank(n_free: usize, dim: usize) -> usize {
    n_free.min(if dim == 1 { 64 } else { 128 })
}

/// Smallest eigenpairs of the homogeneous-Dirichlet Laplacian, with
/// coefficient vectors (full length, zero on the boundary) normalised in L².
#[derive(Debug, Clone)]
pub struct LaplacianEigs {
    pub eigenvalues: Vec<f64>,
    /// Column `l` holds the coefficients of eigenfunction `l`.
    pub coeff_vectors: DMatrix<f64>,
}

impl LaplacianEigs {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Keeps only the first `m` pairs.
    pub fn truncated(&self, m: usize) -> Self {
        let m = m.min(self.rank());
        Self {
            eigenvalues: self.eigenvalues[..m].to_vec(),
            coeff_vectors: self.coeff_vectors.columns(0, m).into_owned(),
        }
    }

    /// Writes `l,lambda,c_0,...` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.coeff_vectors.nrows();
        let mut header = vec!["l".to_string(), "lambda".to_string()];
        header.extend((0..n).map(|i| format!("c_{i}")));
        w.write_record(&header)?;
        for (l, lambda) in self.eigenvalues.iter().enumerate() {
            let mut row = vec![(l + 1).to_string(), format!("{lambda:e}")];
            row.extend(self.coeff_vectors.column(l).iter().map(|c| format!("{c:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves `A g = λ M g` on the free nodes by reducing to the standard
/// symmetric problem `L⁻¹ A L⁻ᵀ w = λ w` with `M = L Lᵀ`.
pub fn solve_laplacian_eigs(system: &FemSystem, m: usize) -> Result<LaplacianEigs> {
    let free = system.mesh.free_nodes();
    let nf = free.len();
    if m == 0 || m > nf {
        return Err(Error::invalid(format!("rank {m} must lie in 1..={nf}")));
    }
    let a = system.stiffness.select_rows(&free).select_columns(&free);
    let mass = system.mass.select_rows(&free).select_columns(&free);
    let l = cholesky(&mass, "mass matrix")?.l();
    let l_inv_a = solve_lower(&l, &a)?;
    let mut c = solve_lower(&l, &l_inv_a.transpose())?;
    symmetrize(&mut c);
    let eig = c.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("eigensolver produced non-finite values"));
    }
    let mut order: Vec<usize> = (0..nf).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let lt = l.transpose();
    let n = system.n_u();
    let mut eigenvalues = Vec::with_capacity(m);
    let mut coeffs = DMatrix::zeros(n, m);
    for (k, &idx) in order.iter().take(m).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= 0.0 {
            return Err(Error::numerical(format!("non-positive Laplacian eigenvalue {lambda:e}")));
        }
        let w = eig.eigenvectors.column(idx).into_owned();
        let mut g = lt
            .solve_upper_triangular(&w)
            .ok_or_else(|| Error::numerical("singular mass factor"))?;
        let norm = g.dot(&(&mass * &g)).sqrt();
        g /= norm;
        for (i, &node) in free.iter().enumerate() {
            coeffs[(node, k)] = g[i];
        }
        eigenvalues.push(lambda);
    }
    Ok(LaplacianEigs { eigenvalues, coeff_vectors: coeffs })
}

/// `Σ_l S(√λ_l) (M g_l)(M g_l)ᵀ + jitter·M`, with boundary rows and columns
/// replaced by the mean interior diagonal so the matrix stays invertible.
pub fn hilbert_covariance(system: &FemSystem, eigs: &LaplacianEigs, kernel: &SeKernel, jitter: f64) -> DMatrix<f64> {
    let mass = &system.mass;
    let mut w = mass * &eigs.coeff_vectors;
    for (l, lambda) in eigs.eigenvalues.iter().enumerate() {
        let s = spectral_density_se(lambda.sqrt(), kernel).sqrt();
        w.column_mut(l).scale_mut(s);
    }
    let mut g = &w * w.transpose();
    if jitter > 0.0 {
        g += mass * jitter;
    }
    symmetrize(&mut g);
    // boundary rows are decoupled from the interior; a diagonal on the
    // interior scale keeps them invertible without adding a stiff mode
    let boundary = system.mesh.boundary_nodes();
    let interior: Vec<f64> = (0..g.nrows()).filter(|i| !boundary.contains(i)).map(|i| g[(i, i)]).collect();
    let diag = if interior.is_empty() {
        kernel.amplitude
    } else {
        interior.iter().sum::<f64>() / interior.len() as f64
    };
    for &i in boundary {
        g.row_mut(i).fill(0.0);
        g.column_mut(i).fill(0.0);
        g[(i, i)] = diag;
    }
    g
}

/// Covariance `G` of the additive model-error field.
pub fn assemble_error_covariance(
    system: &FemSystem,
    eigs: &LaplacianEigs,
    kernel: &SeKernel,
    jitter: f64,
) -> DMatrix<f64> {
    hilbert_covariance(system, eigs, kernel, jitter)
}

/// Gaussian prior on the load vector: mean from the prior mean function,
/// covariance from the prior kernel. Mean entries at boundary nodes are set
/// to zero to match the homogeneous Dirichlet rows of the load.
pub fn assemble_forcing_prior<F>(
    system: &FemSystem,
    mean_fn: F,
    kernel: &SeKernel,
    eigs: &LaplacianEigs,
    jitter: f64,
) -> Result<GaussianDist>
where
    F: Fn(&[f64; 2]) -> f64,
{
    let mut mean = assemble_load(&system.mesh, mean_fn)?;
    for &i in system.mesh.boundary_nodes() {
        mean[i] = 0.0;
    }
    GaussianDist::new(mean, hilbert_covariance(system, eigs, kernel, jitter))
}

/// Multivariate normal with a cached lower Cholesky factor of the covariance.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid("covariance and mean dimensions differ"));
        }
        if relative_asymmetry(&cov) > 1e-8 {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        symmetrize(&mut cov);
        let factor = cholesky(&cov, "covariance")?.l();
        Ok(Self { mean, cov, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower factor `L` with `L Lᵀ = cov`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn variance(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let l_inv = solve_lower(&self.factor, &DMatrix::identity(n, n))?;
        let mut p = l_inv.transpose() * l_inv;
        symmetrize(&mut p);
        Ok(p)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + &self.factor * standard_normal(rng, self.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disc_mesh, build_interval_mesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn interval_system(n: usize) -> FemSystem {
        FemSystem::homogeneous(build_interval_mesh(n).unwrap(), |_| 0.0, &[]).unwrap()
    }

    #[test]
    fn spectral_density_values() {
        let k1 = SeKernel::new(1.0, 1.0, 1).unwrap();
        assert!((spectral_density_se(0.0, &k1) - (2.0 * PI).sqrt()).abs() < 1e-14);
        let k2 = SeKernel::new(1.0, 1.0, 2).unwrap();
        assert!((spectral_density_se(0.0, &k2) - 2.0 * PI).abs() < 1e-14);
        let k = SeKernel::new(4.0, 0.1, 1).unwrap();
        let expected = 4.0 * (2.0 * PI * 0.01f64).sqrt() * (-0.5f64).exp();
        assert!((spectral_density_se(10.0, &k) - expected).abs() < 1e-14);
    }

    #[test]
    fn spectral_density_is_fourier_transform_of_kernel() {
        let k = SeKernel::new(4.0, 0.1, 1).unwrap();
        let omega = 10.0;
        // trapezoid rule for ∫ k(r) cos(ωr) dr over a range where k is negligible beyond
        let (a, n) = (2.0, 40_000);
        let h = 2.0 * a / n as f64;
        let mut sum = 0.0;
        for i in 0..=n {
            let r = -a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            sum += w * k.eval(r) * (omega * r).cos();
        }
        assert!((sum * h - spectral_density_se(omega, &k)).abs() < 1e-10);
    }

    #[test]
    fn kernel_rejects_bad_parameters() {
        assert!(SeKernel::new(0.0, 1.0, 1).is_err());
        assert!(SeKernel::new(1.0, -1.0, 1).is_err());
        assert!(SeKernel::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn interval_eigenvalues_match_sine_modes() {
        let sys = interval_system(129);
        let eigs = solve_laplacian_eigs(&sys, 10).unwrap();
        for l in 1..=5 {
            let exact = (l as f64 * PI).powi(2);
            assert!((eigs.eigenvalues[l - 1] / exact - 1.0).abs() < 0.02, "l={l}");
        }
        let m = &sys.mass;
        for i in 0..10 {
            for j in 0..10 {
                let v = eigs.coeff_vectors.column(i).dot(&(m * eigs.coeff_vectors.column(j)));
                if i == j {
                    assert!((v - 1.0).abs() < 1e-10);
                } else {
                    assert!(v.abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn eigen_residuals_are_small() {
        let sys = interval_system(40);
        let eigs = solve_laplacian_eigs(&sys, 38).unwrap();
        let free = sys.mesh.free_nodes();
        for l in 0..eigs.rank() {
            let g = eigs.coeff_vectors.column(l);
            let ag = &sys.stiffness * g;
            let r = &ag - &sys.mass * g * eigs.eigenvalues[l];
            let r_free: f64 = free.iter().map(|&i| r[i] * r[i]).sum::<f64>().sqrt();
            assert!(r_free <= 1e-8 * ag.norm(), "l={l}");
        }
        assert!(solve_laplacian_eigs(&sys, 39).is_err());
        assert!(solve_laplacian_eigs(&sys, 0).is_err());
    }

    #[test]
    fn disc_ground_eigenvalue() {
        let sys = FemSystem::homogeneous(build_disc_mesh(12).unwrap(), |_| 0.0, &[]).unwrap();
        let eigs = solve_laplacian_eigs(&sys, 3).unwrap();
        assert!((eigs.eigenvalues[0] / 5.7832 - 1.0).abs() < 0.05, "{}", eigs.eigenvalues[0]);
    }

    #[test]
    fn empty_sum_leaves_mass_matrix() {
        let sys = interval_system(9);
        let eigs = solve_laplacian_eigs(&sys, 1).unwrap().truncated(0);
        let k = SeKernel::new(1.0, 0.1, 1).unwrap();
        let g = assemble_error_covariance(&sys, &eigs, &k, 1.0);
        for i in 1..8 {
            for j in 1..8 {
                assert!((g[(i, j)] - sys.mass[(i, j)]).abs() < 1e-15);
            }
        }
        // boundary diagonal = mean interior diagonal = 2h/3
        assert!((g[(0, 0)] - 2.0 / 3.0 / 8.0).abs() < 1e-15);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn covariance_eigenvalues_bounded_below_by_jitter() {
        let sys = interval_system(33);
        let eigs = solve_laplacian_eigs(&sys, 10).unwrap();
        let k = SeKernel::new(2.0, 0.1, 1).unwrap();
        let jitter = 1e-3;
        let g = assemble_error_covariance(&sys, &eigs, &k, jitter);
        assert_eq!(g, g.transpose());
        let free = sys.mesh.free_nodes();
        let gf = g.select_rows(&free).select_columns(&free);
        let mf = sys.mass.select_rows(&free).select_columns(&free);
        let (mmin, _) = crate::linalg::extreme_eigenvalues(&mf);
        let (gmin, _) = crate::linalg::extreme_eigenvalues(&gf);
        assert!(gmin >= jitter * mmin - 1e-12);
        assert!(cholesky(&g, "g").is_ok());
    }

    fn mercer_sum(eigs: &LaplacianEigs, k: &SeKernel, node: usize, m: usize) -> f64 {
        (0..m)
            .map(|l| spectral_density_se(eigs.eigenvalues[l].sqrt(), k) * eigs.coeff_vectors[(node, l)].powi(2))
            .sum()
    }

    #[test]
    fn mercer_sum_recovers_kernel_variance() {
        let sys = interval_system(129);
        let eigs = solve_laplacian_eigs(&sys, 64).unwrap();
        let k = SeKernel::new(1.0, 0.1, 1).unwrap();
        let v = mercer_sum(&eigs, &k, 64, 64);
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn truncation_error_is_monotone() {
        let sys = interval_system(129);
        let eigs = solve_laplacian_eigs(&sys, 64).unwrap();
        let k = SeKernel::new(1.0, 0.1, 1).unwrap();
        // once the series has converged the residual is the mesh discretisation
        // floor (about 2.5e-4 here) and later terms move it by less than 1e-6
        for node in (12..=120).step_by(12) {
            let mut prev = f64::INFINITY;
            for m in [4, 8, 16, 32, 64] {
                let err = (1.0 - mercer_sum(&eigs, &k, node, m)).abs();
                assert!(err <= prev + 1e-6, "node={node} m={m} err={err:e} prev={prev:e}");
                prev = err;
            }
        }
    }

    #[test]
    fn forcing_prior_samples_reproduce_covariance() {
        let sys = interval_system(12);
        let eigs = solve_laplacian_eigs(&sys, 10).unwrap();
        let k = SeKernel::new(4.0, 0.1, 1).unwrap();
        let prior = assemble_forcing_prior(&sys, |_| 0.0, &k, &eigs, 1e-6).unwrap();
        assert_eq!(prior.mean().amax(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = prior.dim();
        let mut acc = DMatrix::zeros(n, n);
        let draws = 100_000;
        for _ in 0..draws {
            let s = prior.sample(&mut rng);
            acc += &s * s.transpose();
        }
        acc /= draws as f64;
        let rel = (acc - prior.cov()).norm() / prior.cov().norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn gaussian_factor_and_precision() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let d = GaussianDist::new(DVector::zeros(2), cov.clone()).unwrap();
        assert!((d.factor() * d.factor().transpose() - &cov).amax() < 1e-14);
        assert!((d.precision().unwrap() * &cov - DMatrix::identity(2, 2)).amax() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianDist::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn eigenpairs_csv_has_header_and_rows() {
        let sys = interval_system(6);
        let eigs = solve_laplacian_eigs(&sys, 3).unwrap();
        let mut buf = Vec::new();
        eigs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "l,lambda,c_0,c_1,c_2,c_3,c_4,c_5");
        assert_eq!(lines.len(), 4);
    }
}

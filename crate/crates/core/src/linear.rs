//! Linear Poisson statFEM model: potentials, gradients, Hessian,
//! preconditioners and closed-form posterior quantities.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSystem;
use crate::gp::GaussianDist;
use crate::linalg::{cholesky, extreme_eigenvalues, solve_lower, solve_lower_vec, standard_normal, symmetrize, SpdOperator};

/// Gaussian prior on the log-diffusivity θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPrior {
    pub mean: f64,
    pub var: f64,
}

impl Default for ThetaPrior {
    fn default() -> Self {
        Self { mean: 0.0, var: 1.0 }
    }
}

/// `A_θ = e^θ A` with model error `G`, observation noise `R`, forcing prior
/// `N(μ, Σ)` and a Gaussian prior on θ.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub system: FemSystem,
    g: DMatrix<f64>,
    g_factor: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    r_factor: DMatrix<f64>,
    pub forcing_prior: GaussianDist,
    pub theta_prior: ThetaPrior,
    pub theta: f64,
}

/// Blocks of the Hessian of the joint potential in `(u, b)`.
#[derive(Debug, Clone)]
pub struct BlockHessian {
    pub uu: DMatrix<f64>,
    pub ub: DMatrix<f64>,
    pub bb: DMatrix<f64>,
}

impl BlockHessian {
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.uu.nrows();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.uu);
        h.view_mut((0, n), (n, n)).copy_from(&self.ub);
        h.view_mut((n, 0), (n, n)).copy_from(&self.ub.transpose());
        h.view_mut((n, n), (n, n)).copy_from(&self.bb);
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityConstants {
    pub mu: f64,
    pub l: f64,
    pub kappa: f64,
}

/// `P_b = (G⁻¹ + Σ⁻¹)⁻¹` with the two weight matrices that split
/// `P_b (G⁻¹ x + Σ⁻¹ μ)`: `P_b G⁻¹ = Σ(G+Σ)⁻¹` and `P_b Σ⁻¹ = G(G+Σ)⁻¹`.
#[derive(Debug, Clone)]
pub struct ForcingPreconditioner {
    pub p_b: SpdOperator,
    pub weight_g: DMatrix<f64>,
    pub weight_sigma: DMatrix<f64>,
}

/// Inverse block-diagonal Hessian preconditioners of the forcing problem.
#[derive(Debug, Clone)]
pub struct Preconditioners {
    pub p_b: SpdOperator,
    pub p_u: SpdOperator,
}

/// Synthetic observations with the hidden truth that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y: DVector<f64>,
    pub u_true: DVector<f64>,
    pub b_true: DVector<f64>,
}

impl LinearModel {
    pub fn new(
        system: FemSystem,
        g: DMatrix<f64>,
        r: DMatrix<f64>,
        forcing_prior: GaussianDist,
        theta_prior: ThetaPrior,
        theta: f64,
    ) -> Result<Self> {
        let n = system.n_u();
        let ny = system.n_y();
        if g.nrows() != n || g.ncols() != n || forcing_prior.dim() != n {
            return Err(Error::invalid("model error and forcing prior must match the number of nodes"));
        }
        if r.nrows() != ny || r.ncols() != ny {
            return Err(Error::invalid("observation noise must match the number of observations"));
        }
        if !(theta_prior.var > 0.0) {
            return Err(Error::invalid("theta prior variance must be positive"));
        }
        let g_factor = cholesky(&g, "model error covariance G")?.l();
        let r_chol = cholesky(&r, "observation noise covariance R")?;
        let r_inv = r_chol.inverse();
        let r_factor = r_chol.l();
        Ok(Self { system, g, g_factor, r, r_inv, r_factor, forcing_prior, theta_prior, theta })
    }

    /// Observation noise `σ_y² I`.
    pub fn isotropic_noise(n_y: usize, sigma_y: f64) -> DMatrix<f64> {
        DMatrix::identity(n_y, n_y) * (sigma_y * sigma_y)
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        let mut m = self.clone();
        m.theta = theta;
        m
    }

    pub fn n_u(&self) -> usize {
        self.system.n_u()
    }

    pub fn n_y(&self) -> usize {
        self.system.n_y()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Lower Cholesky factor of `G`.
    pub fn g_factor(&self) -> &DMatrix<f64> {
        &self.g_factor
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.system.observation
    }

    /// The θ-independent factor `A`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.system.stiffness
    }

    pub fn a_theta(&self) -> DMatrix<f64> {
        self.system.stiffness.scale(self.theta.exp())
    }

    pub fn a_theta_at(&self, theta: f64) -> DMatrix<f64> {
        self.system.stiffness.scale(theta.exp())
    }

    fn g_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w = solve_lower_vec(&self.g_factor, v)?;
        self.g_factor
            .tr_solve_lower_triangular(&w)
            .ok_or_else(|| Error::numerical("singular factor of G"))
    }

    fn g_inverse(&self) -> Result<DMatrix<f64>> {
        let n = self.n_u();
        let l_inv = solve_lower(&self.g_factor, &DMatrix::identity(n, n))?;
        let mut gi = l_inv.transpose() * l_inv;
        symmetrize(&mut gi);
        Ok(gi)
    }

    fn quad_g(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(solve_lower_vec(&self.g_factor, v)?.norm_squared())
    }

    /// `HᵀR⁻¹H`.
    pub fn observation_precision(&self) -> DMatrix<f64> {
        let h = self.h();
        h.transpose() * &self.r_inv * h
    }

    /// `Hᵀ R⁻¹ y`.
    pub fn observation_information(&self, y: &DVector<f64>) -> DVector<f64> {
        self.h().transpose() * (&self.r_inv * y)
    }

    /// Joint potential Ψ(u, b, θ) up to additive constants.
    pub fn potential(&self, u: &DVector<f64>, b: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let resid = self.a_theta() * u - b;
        let obs = self.h() * u - y;
        let prior = b - self.forcing_prior.mean();
        let prior_q = solve_lower_vec(self.forcing_prior.factor(), &prior)?.norm_squared();
        let tp = &self.theta_prior;
        Ok(0.5 * self.quad_g(&resid)? - self.n_u() as f64 * self.theta
            + 0.5 * obs.dot(&(&self.r_inv * &obs))
            + 0.5 * prior_q
            + (self.theta - tp.mean).powi(2) / (2.0 * tp.var))
    }

    /// `A_θᵀG⁻¹(A_θu − b) + HᵀR⁻¹(Hu − y)`.
    pub fn grad_u(&self, u: &DVector<f64>, b: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.a_theta();
        let resid = &a * u - b;
        let obs = self.h() * u - y;
        Ok(a.transpose() * self.g_solve(&resid)? + self.h().transpose() * (&self.r_inv * obs))
    }

    /// `−G⁻¹(A_θu − b) + Σ⁻¹(b − μ)`.
    pub fn grad_b(&self, u: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        let resid = self.a_theta() * u - b;
        let l = self.forcing_prior.factor();
        let prior = b - self.forcing_prior.mean();
        let w = solve_lower_vec(l, &prior)?;
        let sigma_term = l.tr_solve_lower_triangular(&w).ok_or_else(|| Error::numerical("singular factor of Σ"))?;
        Ok(sigma_term - self.g_solve(&resid)?)
    }

    /// `∂Ψ/∂θ = −n_u + (θ − μ_θ)/σ_θ² + (A_θu − b)ᵀG⁻¹A_θu`.
    ///
    /// The `−n_u` comes from `−log det A_θ = −n_u θ − log det A`.
    pub fn grad_theta(&self, u: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        let au = self.a_theta() * u;
        let resid = &au - b;
        Ok(self.theta_prior_drift(self.theta) + self.g_solve(&resid)?.dot(&au))
    }

    /// The data-free part of the θ gradient, `−n_u + (θ − μ_θ)/σ_θ²`.
    pub fn theta_prior_drift(&self, theta: f64) -> f64 {
        -(self.n_u() as f64) + (theta - self.theta_prior.mean) / self.theta_prior.var
    }

    pub fn hessian(&self) -> Result<BlockHessian> {
        let gi = self.g_inverse()?;
        let a = self.a_theta();
        let gia = &gi * &a;
        let mut uu = a.transpose() * &gia + self.observation_precision();
        symmetrize(&mut uu);
        let ub = -gia.transpose();
        let mut bb = gi + self.forcing_prior.precision()?;
        symmetrize(&mut bb);
        Ok(BlockHessian { uu, ub, bb })
    }

    /// Hessian of the potential without the forcing prior (`bb = G⁻¹`).
    pub fn hessian_without_forcing_prior(&self) -> Result<BlockHessian> {
        let mut h = self.hessian()?;
        h.bb = self.g_inverse()?;
        Ok(h)
    }

    /// Root `W` of the joint Hessian, `WᵀW = ∇²Ψ`, stacking the whitened
    /// model-error, observation and (optionally) forcing-prior residuals.
    pub fn hessian_root(&self, with_forcing_prior: bool) -> Result<DMatrix<f64>> {
        let n = self.n_u();
        let ny = self.n_y();
        let rows = n + ny + if with_forcing_prior { n } else { 0 };
        let mut w = DMatrix::zeros(rows, 2 * n);
        w.view_mut((0, 0), (n, n)).copy_from(&self.whitened_operator(self.theta)?);
        let gi = solve_lower(&self.g_factor, &DMatrix::identity(n, n))?;
        w.view_mut((0, n), (n, n)).copy_from(&-gi);
        w.view_mut((n, 0), (ny, n)).copy_from(&solve_lower(&self.r_factor, self.h())?);
        if with_forcing_prior {
            let si = solve_lower(self.forcing_prior.factor(), &DMatrix::identity(n, n))?;
            w.view_mut((n + ny, n), (n, n)).copy_from(&si);
        }
        Ok(w)
    }

    /// `L_G⁻¹ A_θ`, the whitened forward operator with `BᵀB = A_θᵀG⁻¹A_θ`.
    pub fn whitened_operator(&self, theta: f64) -> Result<DMatrix<f64>> {
        solve_lower(&self.g_factor, &self.a_theta_at(theta))
    }

    /// `P_u[θ] = (A_θᵀG⁻¹A_θ + HᵀR⁻¹H)⁻¹`, built from its precision.
    pub fn build_p_u(&self, theta: f64) -> Result<SpdOperator> {
        let b = self.whitened_operator(theta)?;
        solution_preconditioner(&b, &self.observation_precision())
    }

    pub fn build_preconditioners(&self) -> Result<Preconditioners> {
        let forcing = self.forcing_preconditioner()?;
        Ok(Preconditioners { p_b: forcing.p_b, p_u: self.build_p_u(self.theta)? })
    }

    pub fn forcing_preconditioner(&self) -> Result<ForcingPreconditioner> {
        forcing_preconditioner(&self.g, self.forcing_prior.cov())
    }

    /// Mean and covariance of the statFEM prior `p(u | θ, b)`.
    pub fn statfem_prior(&self, b: &DVector<f64>) -> Result<GaussianDist> {
        let a = self.a_theta();
        let lu = a.clone().lu();
        let mean = lu.solve(b).ok_or_else(|| Error::numerical("A_θ is singular"))?;
        let a_inv_l = lu.solve(&self.g_factor).ok_or_else(|| Error::numerical("A_θ is singular"))?;
        GaussianDist::new(mean, &a_inv_l * a_inv_l.transpose())
    }

    /// Exact posterior `p(u | y, θ, b)`.
    pub fn analytic_posterior(&self, b: &DVector<f64>, y: &DVector<f64>) -> Result<GaussianDist> {
        let p_u = self.build_p_u(self.theta)?;
        let a = self.a_theta();
        let rhs = self.observation_information(y) + a.transpose() * self.g_solve(b)?;
        let mean = p_u.apply(&rhs);
        GaussianDist::new(mean, p_u.matrix().clone())
    }

    /// Maximiser of `p(b | θ, y)`, in gain form:
    /// `b* = μ + ΣX(Xᵀ(G+Σ)X + R)⁻¹(y − Xᵀμ)` with `X = A_θ⁻ᵀHᵀ`.
    pub fn analytic_mmap(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mu = self.forcing_prior.mean();
        if self.n_y() == 0 {
            return Ok(mu.clone());
        }
        let sigma = self.forcing_prior.cov();
        let a_t = self.a_theta().transpose();
        let x = a_t
            .lu()
            .solve(&self.h().transpose())
            .ok_or_else(|| Error::numerical("A_θ is singular"))?;
        let gs = &self.g + sigma;
        let mut s = x.transpose() * gs * &x + &self.r;
        symmetrize(&mut s);
        let innov = y - x.transpose() * mu;
        let gain_rhs = cholesky(&s, "marginal observation covariance")?.solve(&innov);
        Ok(mu + sigma * (&x * gain_rhs))
    }

    /// Draws `e ~ N(0, G)`, solves `A_θ u = b_true + e`, and observes
    /// `y = H u + r`, `r ~ N(0, R)`.
    pub fn generate_data(&self, b_true: &DVector<f64>, seed: u64) -> Result<SyntheticData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &self.g_factor * standard_normal(&mut rng, self.n_u());
        let u_true = self
            .a_theta()
            .lu()
            .solve(&(b_true + e))
            .ok_or_else(|| Error::numerical("A_θ is singular"))?;
        let r = &self.r_factor * standard_normal(&mut rng, self.n_y());
        let y = self.h() * &u_true + r;
        Ok(SyntheticData { y, u_true, b_true: b_true.clone() })
    }

    /// Dimensions, θ, priors and condition numbers as JSON.
    pub fn summary(&self) -> Result<serde_json::Value> {
        let hess = self.hessian()?;
        let plain = convexity_constants(&hess, None)?;
        let pre = self.build_preconditioners()?;
        let precond = convexity_constants(&hess, Some((&pre.p_u, &pre.p_b)))?;
        Ok(serde_json::json!({
            "n_u": self.n_u(),
            "n_y": self.n_y(),
            "theta": self.theta,
            "theta_prior": self.theta_prior,
            "convexity": plain,
            "convexity_preconditioned": precond,
        }))
    }
}

/// `(BᵀB + HᵀR⁻¹H)⁻¹` for a precision root `B` of the latent prior.
pub fn solution_preconditioner(root: &DMatrix<f64>, obs_precision: &DMatrix<f64>) -> Result<SpdOperator> {
    let q = root.transpose() * root + obs_precision;
    SpdOperator::from_precision(&q, "solution-block precision")
}

/// `P_b = (G⁻¹ + Σ⁻¹)⁻¹ = Σ(G+Σ)⁻¹G` with the weights `Σ(G+Σ)⁻¹` and
/// `G(G+Σ)⁻¹`; avoids inverting the ill-conditioned `G` and `Σ`.
pub fn forcing_preconditioner(g: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<ForcingPreconditioner> {
    let mut s = g + sigma;
    symmetrize(&mut s);
    let chol = cholesky(&s, "G + Σ")?;
    let s_inv_g = chol.solve(g);
    let s_inv_sigma = chol.solve(sigma);
    let p_b = sigma * &s_inv_g;
    let p_b = SpdOperator::from_matrix(p_b, "forcing preconditioner")?;
    Ok(ForcingPreconditioner { p_b, weight_g: s_inv_sigma.transpose(), weight_sigma: s_inv_g.transpose() })
}

/// Extreme eigenvalues of the Hessian, or of `FᵀHF` when a block-diagonal
/// preconditioner `P = diag(P_u, P_b)` with factors `F Fᵀ = P` is given.
pub fn convexity_constants(
    hess: &BlockHessian,
    precond: Option<(&SpdOperator, &SpdOperator)>,
) -> Result<ConvexityConstants> {
    let full = hess.full();
    let matrix = match precond {
        None => full,
        Some((pu, pb)) => {
            let n = hess.uu.nrows();
            if pu.dim() != n || pb.dim() != n {
                return Err(Error::invalid("preconditioner dimensions do not match the Hessian"));
            }
            let mut f = DMatrix::zeros(2 * n, 2 * n);
            f.view_mut((0, 0), (n, n)).copy_from(pu.factor());
            f.view_mut((n, n), (n, n)).copy_from(pb.factor());
            let mut m = f.transpose() * full * &f;
            symmetrize(&mut m);
            m
        }
    };
    Ok(constants_of(&matrix))
}

/// `(λ_min, λ_max, λ_max/λ_min)` of a symmetric matrix.
pub fn constants_of(matrix: &DMatrix<f64>) -> ConvexityConstants {
    let (mu, l) = extreme_eigenvalues(matrix);
    ConvexityConstants { mu, l, kappa: l / mu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{interval_observation_points, FemSystem};
    use crate::gp::{assemble_error_covariance, assemble_forcing_prior, solve_laplacian_eigs, SeKernel};
    use crate::mesh::{build_interval_mesh, Mesh};
    use std::collections::BTreeSet;

    fn small_model(n: usize, n_y: usize) -> (LinearModel, DVector<f64>) {
        let mesh = build_interval_mesh(n).unwrap();
        let pts = interval_observation_points(n_y);
        let sys = FemSystem::homogeneous(mesh, |x| 5.0 * (6.0 * std::f64::consts::PI * x[0]).sin(), &pts).unwrap();
        let eigs = solve_laplacian_eigs(&sys, n - 2).unwrap();
        let k = SeKernel::new(1.0, 0.1, 1).unwrap();
        let kf = SeKernel::new(4.0, 0.1, 1).unwrap();
        let g = assemble_error_covariance(&sys, &eigs, &k, 1e-3);
        let prior = assemble_forcing_prior(&sys, |_| 0.0, &kf, &eigs, 1e-3).unwrap();
        let r = LinearModel::isotropic_noise(n_y, 0.1);
        let model = LinearModel::new(sys, g, r, prior, ThetaPrior { mean: 0.3, var: 0.5 }, 0.2).unwrap();
        let data = model.generate_data(&model.system.load, 7).unwrap();
        (model, data.y)
    }

    /// Three free-standing unknowns without boundary nodes: a hand-checkable model.
    fn three_dof() -> (LinearModel, DVector<f64>) {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let mesh = Mesh::new(1, nodes, vec![vec![0, 1], vec![1, 2]], BTreeSet::new()).unwrap();
        let h = DMatrix::from_row_slice(2, 3, &[0.5, 0.5, 0.0, 0.0, 0.2, 0.8]);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let sys = FemSystem {
            mass: DMatrix::identity(3, 3),
            load: DVector::from_vec(vec![1.0, 0.5, -0.2]),
            stiffness: a,
            observation: h,
            bc_nodes: vec![],
            mesh,
        };
        let g = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.3]);
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0]);
        let prior = GaussianDist::new(DVector::from_vec(vec![0.2, -0.1, 0.4]), sigma).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.08]);
        let model = LinearModel::new(sys, g, r, prior, ThetaPrior::default(), 0.1).unwrap();
        (model, DVector::from_vec(vec![0.7, -0.3]))
    }

    fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone().try_inverse().unwrap()
    }

    #[test]
    fn prior_matches_explicit_inverse() {
        let (m, _) = three_dof();
        let b = DVector::from_vec(vec![0.3, 0.1, -0.5]);
        let p = m.statfem_prior(&b).unwrap();
        let ai = inv(&m.a_theta());
        assert!((p.mean() - &ai * &b).amax() < 1e-12);
        assert!((p.cov() - &ai * m.g() * ai.transpose()).amax() < 1e-12);
    }

    #[test]
    fn identity_prior() {
        let (mut m, _) = three_dof();
        m.system.stiffness = DMatrix::identity(3, 3);
        m.theta = 0.0;
        let m = LinearModel::new(m.system.clone(), DMatrix::identity(3, 3), m.r().clone(), m.forcing_prior.clone(), m.theta_prior, 0.0)
            .unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let p = m.statfem_prior(&b).unwrap();
        assert_eq!(p.mean(), &b);
        assert!((p.cov() - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn gradients_vanish_at_trivial_points() {
        let (m, _) = three_dof();
        let z = DVector::zeros(3);
        assert_eq!(m.grad_u(&z, &z, &DVector::zeros(2)).unwrap().amax(), 0.0);
        let mu = m.forcing_prior.mean().clone();
        let u = m.a_theta().lu().solve(&mu).unwrap();
        assert!(m.grad_b(&u, &mu).unwrap().amax() < 1e-12);
        let m0 = m.with_theta(m.theta_prior.mean);
        assert_eq!(m0.grad_theta(&z, &z).unwrap(), -3.0);
    }

    fn fd_check(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, grad: &DVector<f64>) {
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let scale = grad.amax().max(1e-8);
            assert!((fd - grad[i]).abs() <= 1e-6 * scale, "i={i} fd={fd} an={}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, y) = small_model(9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = standard_normal(&mut rng, 9) * 0.1;
        let b = standard_normal(&mut rng, 9) * 0.1;
        let gu = m.grad_u(&u, &b, &y).unwrap();
        fd_check(|v| m.potential(v, &b, &y).unwrap(), &u, &gu);
        let gb = m.grad_b(&u, &b).unwrap();
        fd_check(|v| m.potential(&u, v, &y).unwrap(), &b, &gb);
        let gt = m.grad_theta(&u, &b).unwrap();
        let h = 1e-5;
        let fd = (m.with_theta(m.theta + h).potential(&u, &b, &y).unwrap()
            - m.with_theta(m.theta - h).potential(&u, &b, &y).unwrap())
            / (2.0 * h);
        assert!((fd - gt).abs() <= 1e-6 * gt.abs().max(1.0), "fd={fd} an={gt}");
    }

    #[test]
    fn hessian_matches_second_differences() {
        let (m, y) = three_dof();
        let hess = m.hessian().unwrap().full();
        assert_eq!(hess, hess.transpose());
        let n = 3;
        let joint = |v: &DVector<f64>| {
            let u = v.rows(0, n).into_owned();
            let b = v.rows(n, n).into_owned();
            m.potential(&u, &b, &y).unwrap()
        };
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.05, 0.4, -0.1]);
        let h = 1e-4;
        for i in 0..6 {
            for j in 0..6 {
                let e = |di: f64, dj: f64| {
                    let mut v = x.clone();
                    v[i] += di;
                    v[j] += dj;
                    joint(&v)
                };
                let fd = (e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h);
                assert!((fd - hess[(i, j)]).abs() <= 1e-5 * hess.amax(), "({i},{j}) {fd} {}", hess[(i, j)]);
            }
        }
    }

    #[test]
    fn strong_convexity_and_mmle_convexity() {
        for (m, _) in [small_model(9, 4), small_model(17, 8)] {
            for prior in [true, false] {
                let w = m.hessian_root(prior).unwrap();
                let h = if prior { m.hessian() } else { m.hessian_without_forcing_prior() }.unwrap().full();
                let gram = w.transpose() * &w;
                assert!((&gram - &h).amax() <= 1e-8 * h.amax(), "{}", (&gram - &h).amax());
            }
            let full = m.hessian().unwrap().full();
            assert!(extreme_eigenvalues(&full).0 > 0.0);
            let without = m.hessian_without_forcing_prior().unwrap().full();
            let (lo, hi) = extreme_eigenvalues(&without);
            assert!(lo >= -1e-10 * hi.max(1.0), "{lo}");
        }
    }

    #[test]
    fn preconditioners_invert_block_diagonal() {
        let (m, y) = small_model(12, 5);
        let pre = m.build_preconditioners().unwrap();
        let hess = m.hessian().unwrap();
        let id = pre.p_u.matrix() * &hess.uu;
        assert!((id - DMatrix::identity(12, 12)).amax() < 1e-8);
        let idb = pre.p_b.matrix() * &hess.bb;
        assert!((idb - DMatrix::identity(12, 12)).amax() < 1e-6);
        let post = m.analytic_posterior(&m.system.load, &y).unwrap();
        assert!((post.cov() - pre.p_u.matrix()).amax() < 1e-12);
        let g = m.grad_u(post.mean(), &m.system.load, &y).unwrap();
        assert!(pre.p_u.apply(&g).norm() < 1e-8 * y.norm().max(1.0));
    }

    #[test]
    fn identity_preconditioner_keeps_constants() {
        let (m, _) = three_dof();
        let hess = m.hessian().unwrap();
        let id = SpdOperator::identity(3);
        let a = convexity_constants(&hess, None).unwrap();
        let b = convexity_constants(&hess, Some((&id, &id))).unwrap();
        assert!((a.mu - b.mu).abs() < 1e-12 && (a.l - b.l).abs() < 1e-12);
    }

    #[test]
    fn whitening_diagonal_hessian() {
        let hess = BlockHessian {
            uu: DMatrix::from_element(1, 1, 1.0),
            ub: DMatrix::zeros(1, 1),
            bb: DMatrix::from_element(1, 1, 4.0),
        };
        let pu = SpdOperator::identity(1);
        let pb = SpdOperator::from_matrix(DMatrix::from_element(1, 1, 0.25), "p").unwrap();
        let c = convexity_constants(&hess, Some((&pu, &pb))).unwrap();
        assert!((c.kappa - 1.0).abs() < 1e-14);
    }

    #[test]
    fn woodbury_split_of_forcing_preconditioner() {
        let (m, _) = small_model(10, 3);
        let sigma = m.forcing_prior.cov();
        let ForcingPreconditioner { p_b, weight_g: wg, weight_sigma: ws } = forcing_preconditioner(m.g(), sigma).unwrap();
        let gi = inv(m.g());
        let si = inv(sigma);
        let scale = p_b.matrix().amax();
        let wg_ref = p_b.matrix() * &gi;
        let ws_ref = p_b.matrix() * &si;
        assert!((&wg - wg_ref).amax() < 1e-6 * wg.amax().max(1.0));
        assert!((&ws - ws_ref).amax() < 1e-6 * ws.amax().max(1.0));
        assert!((wg + ws - DMatrix::identity(10, 10)).amax() < 1e-10);
        assert!(scale > 0.0);
    }

    /// Independent route to `p(b | y)`: marginal Gaussian with covariance
    /// `K = H A⁻¹ (G + ...)`, maximised by plain gradient descent.
    fn log_marginal_gradient(m: &LinearModel, b: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let ai = inv(&m.a_theta());
        let hx = m.h() * &ai;
        let s = &hx * m.g() * hx.transpose() + m.r();
        let si = inv(&s);
        let prior_prec = inv(m.forcing_prior.cov());
        hx.transpose() * &si * (y - &hx * b) - prior_prec * (b - m.forcing_prior.mean())
    }

    #[test]
    fn mmap_matches_gradient_ascent_and_joint_stationarity() {
        let (m, y) = three_dof();
        let b_star = m.analytic_mmap(&y).unwrap();
        let mut b = DVector::zeros(3);
        for _ in 0..200_000 {
            let g = log_marginal_gradient(&m, &b, &y);
            if g.norm() < 1e-13 {
                break;
            }
            b += g * 0.05;
        }
        assert!((&b - &b_star).amax() < 1e-6, "{b} vs {b_star}");
        let post = m.analytic_posterior(&b_star, &y).unwrap();
        let gu = m.grad_u(post.mean(), &b_star, &y).unwrap();
        let gb = m.grad_b(post.mean(), &b_star).unwrap();
        assert!(gu.amax() < 1e-8 && gb.amax() < 1e-8, "{gu} {gb}");
    }

    #[test]
    fn mmap_without_data_is_prior_mean() {
        let mesh = build_interval_mesh(6).unwrap();
        let sys = FemSystem::homogeneous(mesh, |_| 1.0, &[]).unwrap();
        let eigs = solve_laplacian_eigs(&sys, 4).unwrap();
        let k = SeKernel::new(1.0, 0.2, 1).unwrap();
        let g = assemble_error_covariance(&sys, &eigs, &k, 1e-4);
        let prior = assemble_forcing_prior(&sys, |x| x[0], &k, &eigs, 1e-4).unwrap();
        let m = LinearModel::new(sys, g, DMatrix::zeros(0, 0), prior, ThetaPrior::default(), 0.0).unwrap();
        assert_eq!(&m.analytic_mmap(&DVector::zeros(0)).unwrap(), m.forcing_prior.mean());
    }

    #[test]
    fn posterior_matches_joint_conditioning() {
        let (m, y) = three_dof();
        let b = DVector::from_vec(vec![0.3, -0.4, 0.2]);
        let ai = inv(&m.a_theta());
        let mean_u = &ai * &b;
        let cu = &ai * m.g() * ai.transpose();
        let h = m.h();
        let cyy = h * &cu * h.transpose() + m.r();
        let cuy = &cu * h.transpose();
        let gain = &cuy * inv(&cyy);
        let cond_mean = &mean_u + &gain * (&y - h * &mean_u);
        let cond_cov = &cu - &gain * cuy.transpose();
        let post = m.analytic_posterior(&b, &y).unwrap();
        assert!((post.mean() - cond_mean).amax() < 1e-12);
        assert!((post.cov() - cond_cov).amax() < 1e-12);
    }

    #[test]
    fn mmap_is_local_maximum() {
        let (m, y) = small_model(9, 4);
        let b_star = m.analytic_mmap(&y).unwrap();
        let ai = inv(&m.a_theta());
        let hx = m.h() * &ai;
        let s = &hx * m.g() * hx.transpose() + m.r();
        let si = inv(&s);
        let pi = inv(m.forcing_prior.cov());
        let logp = |b: &DVector<f64>| {
            let d = &y - &hx * b;
            let p = b - m.forcing_prior.mean();
            -0.5 * d.dot(&(&si * &d)) - 0.5 * p.dot(&(&pi * &p))
        };
        let base = logp(&b_star);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = standard_normal(&mut rng, 9);
            let d = d.normalize() * 1e-3;
            assert!(logp(&(&b_star + d)) < base);
        }
    }

    #[test]
    fn noiseless_data_is_forward_observation() {
        let (m, _) = three_dof();
        let tiny = LinearModel::new(
            m.system.clone(),
            DMatrix::identity(3, 3) * 1e-300,
            DMatrix::identity(2, 2) * 1e-300,
            m.forcing_prior.clone(),
            m.theta_prior,
            m.theta,
        )
        .unwrap();
        let b = m.system.load.clone();
        let d = tiny.generate_data(&b, 1).unwrap();
        let exact = m.h() * m.a_theta().lu().solve(&b).unwrap();
        assert!((d.y - exact).amax() < 1e-12);
        let again = m.generate_data(&b, 9).unwrap();
        assert_eq!(again.y, m.generate_data(&b, 9).unwrap().y);
    }

    #[test]
    fn data_covariance_matches_marginal() {
        let (m, _) = three_dof();
        let b = m.system.load.clone();
        let ai = inv(&m.a_theta());
        let hx = m.h() * &ai;
        let base = &hx * &b;
        let expected = &hx * m.g() * hx.transpose() + m.r();
        let reps = 10_000;
        let mut acc = DMatrix::zeros(2, 2);
        for s in 0..reps {
            let d = m.generate_data(&b, s as u64).unwrap().y - &base;
            acc += &d * d.transpose();
        }
        acc /= reps as f64;
        assert!((acc - &expected).norm() / expected.norm() < 0.1);
    }
}

//! Nonlinear Poisson statFEM with solution-dependent diffusivity: residual,
//! Jacobian, Newton solver, Gaussian approximations of the induced prior and
//! particle forcing estimation.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, element_geometry, quadrature_rule, DirichletSpec, FemSystem, QuadPoint};
use crate::gp::GaussianDist;
use crate::linalg::{cholesky, extreme_eigenvalues, solve_lower, solve_lower_vec, standard_normal, symmetrize, SpdOperator};
use crate::linear::{forcing_preconditioner, solution_preconditioner, LinearModel};
use crate::mesh::Mesh;
use crate::samplers::{ordered_mean, run_forcing_iterations, ForcingTarget, IplaConfig, Trace};

/// Diffusivity `q(u)` with derivative `q'(u)`.
#[derive(Clone)]
pub enum DiffusivityLaw {
    /// `q ≡ 1`: the residual is the linear stiffness action.
    Constant,
    /// `q(u) = 1 + u²`.
    OnePlusSquare,
    Custom {
        q: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        dq: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl std::fmt::Debug for DiffusivityLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant => write!(f, "Constant"),
            Self::OnePlusSquare => write!(f, "OnePlusSquare"),
            Self::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl DiffusivityLaw {
    pub fn q(&self, u: f64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::OnePlusSquare => 1.0 + u * u,
            Self::Custom { q, .. } => q(u),
        }
    }

    pub fn dq(&self, u: f64) -> f64 {
        match self {
            Self::Constant => 0.0,
            Self::OnePlusSquare => 2.0 * u,
            Self::Custom { dq, .. } => dq(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproxMethod {
    Fot,
    Ut,
    Mc,
}

impl ApproxMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fot => "fot",
            Self::Ut => "ut",
            Self::Mc => "mc",
        }
    }

    /// Default number of iterations between approximation refreshes.
    pub fn default_refresh_stride(&self) -> usize {
        match self {
            Self::Fot => 1,
            Self::Ut | Self::Mc => 10,
        }
    }
}

/// Unscented-transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 2.0, kappa: 0.0 }
    }
}

/// UT weights: `(λ, mean weights (w0, wj), covariance centre weight ŵ0)`.
pub fn ut_weights(n: usize, p: &UtParams) -> (f64, f64, f64, f64) {
    let n = n as f64;
    let lambda = p.alpha * p.alpha * (n + p.kappa) - n;
    let w0 = lambda / (n + lambda);
    let wj = 1.0 / (2.0 * (n + lambda));
    let w0_cov = w0 + 1.0 - p.alpha * p.alpha + p.beta;
    (lambda, w0, wj, w0_cov)
}

/// Newton settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50, max_halvings: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Nonlinear system `F(u) = b + e`, `e ~ N(0, G)`, observed through `H`.
///
/// Residual rows at constrained nodes are `u_i − u_D`; interior rows are
/// evaluated on the lifted function whose boundary coefficients equal `u_D`,
/// so the Jacobian has identity boundary rows and no boundary columns.
#[derive(Debug, Clone)]
pub struct NonlinearSystem {
    mesh: Mesh,
    law: DiffusivityLaw,
    bc: DirichletSpec,
    stiffness: DMatrix<f64>,
    lift: DVector<f64>,
    g: DMatrix<f64>,
    g_factor: DMatrix<f64>,
    h: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    pub forcing_prior: GaussianDist,
    pub newton: NewtonOptions,
    pub ut: UtParams,
    pub mc_samples: usize,
}

impl NonlinearSystem {
    /// `system` supplies the mesh, the observation operator and, for the
    /// constant law, the Dirichlet-treated stiffness matrix.
    pub fn new(
        system: &FemSystem,
        law: DiffusivityLaw,
        bc: DirichletSpec,
        g: DMatrix<f64>,
        r: &DMatrix<f64>,
        forcing_prior: GaussianDist,
    ) -> Result<Self> {
        let n = system.n_u();
        if g.nrows() != n || forcing_prior.dim() != n || r.nrows() != system.n_y() {
            return Err(Error::invalid("dimensions of G, R or the forcing prior do not match the mesh"));
        }
        if let Some(&bad) = bc.values.keys().find(|&&i| !system.mesh.is_boundary(i)) {
            return Err(Error::invalid(format!("node {bad} is not a boundary node")));
        }
        let raw = assemble_stiffness(&system.mesh)?;
        let mut stiffness = system.stiffness.clone();
        for &i in bc.values.keys() {
            stiffness.row_mut(i).fill(0.0);
            stiffness.column_mut(i).fill(0.0);
            stiffness[(i, i)] = 1.0;
        }
        let mut lift = DVector::zeros(n);
        for (&i, &v) in &bc.values {
            if v != 0.0 {
                for j in 0..n {
                    if !bc.values.contains_key(&j) {
                        lift[j] += raw[(j, i)] * v;
                    }
                }
            }
            lift[i] = -v;
        }
        let g_factor = cholesky(&g, "model error covariance G")?.l();
        let r_inv = cholesky(r, "observation noise covariance R")?.inverse();
        Ok(Self {
            mesh: system.mesh.clone(),
            law,
            bc,
            stiffness,
            lift,
            g,
            g_factor,
            h: system.observation.clone(),
            r_inv,
            forcing_prior,
            newton: NewtonOptions::default(),
            ut: UtParams::default(),
            mc_samples: 200,
        })
    }

    /// Nonlinear system sharing every ingredient of a linear model at θ = 0.
    pub fn from_linear(model: &LinearModel, law: DiffusivityLaw) -> Result<Self> {
        let bc = DirichletSpec::homogeneous(&model.system.mesh);
        Self::new(&model.system, law, bc, model.g().clone(), model.r(), model.forcing_prior.clone())
    }

    pub fn n_u(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.h.nrows()
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn law(&self) -> &DiffusivityLaw {
        &self.law
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn dirichlet(&self) -> &DirichletSpec {
        &self.bc
    }

    pub fn observation_precision(&self) -> DMatrix<f64> {
        self.h.transpose() * &self.r_inv * &self.h
    }

    pub fn observation_information(&self, y: &DVector<f64>) -> DVector<f64> {
        self.h.transpose() * (&self.r_inv * y)
    }

    fn lifted(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut v = u.clone();
        for (&i, &g) in &self.bc.values {
            v[i] = g;
        }
        v
    }

    fn has_lift(&self) -> bool {
        !self.bc.is_homogeneous()
    }

    fn element_data(&self, e: usize, u: &DVector<f64>) -> Result<(f64, Vec<[f64; 2]>, [f64; 2], Vec<(QuadPoint, f64)>)> {
        let geo = element_geometry(&self.mesh, e)?;
        let elem = &self.mesh.elements()[e];
        let mut grad_u = [0.0; 2];
        for (k, &node) in elem.iter().enumerate() {
            grad_u[0] += u[node] * geo.grads[k][0];
            grad_u[1] += u[node] * geo.grads[k][1];
        }
        let pts = quadrature_rule(self.mesh.dim())
            .into_iter()
            .map(|q| {
                let uq: f64 = elem.iter().enumerate().map(|(k, &n)| q.bary[k] * u[n]).sum();
                (q, uq)
            })
            .collect();
        Ok((geo.measure, geo.grads, grad_u, pts))
    }

    /// `[F(u)]_i = ⟨q(u_h)∇u_h, ∇φ_i⟩` on free rows, `u_i − u_D` on constrained rows.
    pub fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.n_u() {
            return Err(Error::invalid("coefficient vector has the wrong length"));
        }
        if let DiffusivityLaw::Constant = self.law {
            let mut f = &self.stiffness * u;
            if self.has_lift() {
                f += &self.lift;
            }
            return Ok(f);
        }
        let v = self.lifted(u);
        let mut f = DVector::zeros(self.n_u());
        for e in 0..self.mesh.elements().len() {
            let (measure, grads, gu, pts) = self.element_data(e, &v)?;
            let qbar: f64 = pts.iter().map(|(q, uq)| q.weight * self.law.q(*uq)).sum::<f64>() * measure;
            for (k, &node) in self.mesh.elements()[e].iter().enumerate() {
                f[node] += qbar * (gu[0] * grads[k][0] + gu[1] * grads[k][1]);
            }
        }
        for (&i, &g) in &self.bc.values {
            f[i] = u[i] - g;
        }
        Ok(f)
    }

    /// `J_ij = ∫[q(u_h)∇φ_j + q'(u_h)φ_j∇u_h]·∇φ_i` on free rows and columns,
    /// identity on constrained rows.
    pub fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        if let DiffusivityLaw::Constant = self.law {
            return Ok(self.stiffness.clone());
        }
        let v = self.lifted(u);
        let n = self.n_u();
        let mut j = DMatrix::zeros(n, n);
        for e in 0..self.mesh.elements().len() {
            let (measure, grads, gu, pts) = self.element_data(e, &v)?;
            let elem = &self.mesh.elements()[e];
            let qbar: f64 = pts.iter().map(|(q, uq)| q.weight * self.law.q(*uq)).sum::<f64>() * measure;
            for (lj, &gj) in elem.iter().enumerate() {
                let dq_phi: f64 =
                    pts.iter().map(|(q, uq)| q.weight * self.law.dq(*uq) * q.bary[lj]).sum::<f64>() * measure;
                for (li, &gi) in elem.iter().enumerate() {
                    let a = grads[lj][0] * grads[li][0] + grads[lj][1] * grads[li][1];
                    let b = gu[0] * grads[li][0] + gu[1] * grads[li][1];
                    j[(gi, gj)] += qbar * a + dq_phi * b;
                }
            }
        }
        for &i in self.bc.values.keys() {
            j.row_mut(i).fill(0.0);
            j.column_mut(i).fill(0.0);
            j[(i, i)] = 1.0;
        }
        Ok(j)
    }

    /// Solves `F(u) = b` by damped Newton iteration from `u0`.
    pub fn newton_solve(&self, b: &DVector<f64>, u0: &DVector<f64>) -> Result<NewtonResult> {
        let opts = self.newton;
        if !(opts.tol > 0.0) {
            return Err(Error::invalid("Newton tolerance must be positive"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("load vector has non-finite entries"));
        }
        let mut u = u0.clone();
        let mut r = self.residual(&u)? - b;
        let mut norm = r.norm();
        for it in 0..opts.max_iter {
            if norm <= opts.tol {
                return Ok(NewtonResult { u, iterations: it, residual: norm });
            }
            let j = self.jacobian(&u)?;
            let delta = j.lu().solve(&(-&r)).ok_or_else(|| Error::numerical("singular Jacobian"))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial = &u + &delta * t;
                let rt = self.residual(&trial)? - b;
                let nt = rt.norm();
                if nt.is_finite() && nt < norm {
                    u = trial;
                    r = rt;
                    norm = nt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence { iterations: it + 1, residual: norm });
            }
        }
        if norm <= opts.tol {
            return Ok(NewtonResult { u, iterations: opts.max_iter, residual: norm });
        }
        Err(Error::NonConvergence { iterations: opts.max_iter, residual: norm })
    }

    /// First-order Taylor approximation of `p(u | b)` around `F(m) = b`.
    pub fn approx_fot(&self, b: &DVector<f64>, u0: &DVector<f64>) -> Result<GaussApprox> {
        let sol = self.newton_solve(b, u0)?;
        let m = sol.u;
        let j = self.jacobian(&m)?;
        let root = solve_lower(&self.g_factor, &j)?;
        // b + J m − F(m) equals J m at convergence and is exactly b when F is linear
        let shifted = b + (&j * &m - self.residual(&m)?);
        let info = root.tr_mul(&solve_lower_vec(&self.g_factor, &shifted)?);
        let x = j.lu().solve(&self.g_factor).ok_or_else(|| Error::numerical("singular Jacobian"))?;
        let mut cov = &x * x.transpose();
        symmetrize(&mut cov);
        Ok(GaussApprox { method: ApproxMethod::Fot, mean: m, cov, root, info, newton_iterations: sol.iterations })
    }

    /// Unscented transform with sigma points along the eigenvectors of `G`.
    pub fn approx_ut(&self, b: &DVector<f64>, u0: &DVector<f64>) -> Result<GaussApprox> {
        let n = self.n_u();
        let (lambda, _, wj, _) = ut_weights(n, &self.ut);
        let spread = (n as f64 + lambda).sqrt();
        let eig = self.g.clone().symmetric_eigen();
        let centre = self
            .newton_solve(b, u0)
            .map_err(|e| Error::Approximation(format!("sigma point 0: {e}")))?;
        let mut iterations = centre.iterations;
        let u_c = centre.u;
        let mut offsets = Vec::with_capacity(2 * n);
        for jdx in 0..n {
            let sigma = eig.eigenvalues[jdx].max(0.0).sqrt();
            let dir = eig.eigenvectors.column(jdx) * (spread * sigma);
            for (sign, label) in [(1.0, "+"), (-1.0, "-")] {
                let s = b + &dir * sign;
                let sol = self
                    .newton_solve(&s, &u_c)
                    .map_err(|e| Error::Approximation(format!("sigma point {label}{}: {e}", jdx + 1)))?;
                iterations += sol.iterations;
                offsets.push(sol.u - &u_c);
            }
        }
        // m = Σ w u with Σ w = 1, written relative to the centre point
        let mut shift = DVector::zeros(n);
        for d in &offsets {
            shift += d * wj;
        }
        let mean = &u_c + &shift;
        // Σ ŵ (u − m)(u − m)ᵀ expanded around the centre: the large negative
        // centre weight cancels exactly, leaving a coefficient ŵ0 − w0 − 1 on s sᵀ
        let mut cov = &shift * shift.transpose() * (self.ut.beta - self.ut.alpha * self.ut.alpha);
        for d in &offsets {
            cov.ger(wj, d, d, 1.0);
        }
        symmetrize(&mut cov);
        let cov = checked_with_jitter(cov, "unscented transform")?;
        GaussApprox::from_moments(ApproxMethod::Ut, mean, cov, iterations)
    }

    /// Monte Carlo moments from `mc_samples` solves at `b + e`, `e ~ N(0, G)`.
    pub fn approx_mc(&self, b: &DVector<f64>, u0: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<GaussApprox> {
        let m_samples = self.mc_samples;
        if m_samples < 2 {
            return Err(Error::invalid("Monte Carlo approximation needs at least two samples"));
        }
        let n = self.n_u();
        let mut samples = Vec::with_capacity(m_samples);
        let mut failures = 0;
        let mut iterations = 0;
        for _ in 0..m_samples {
            let s = b + &self.g_factor * standard_normal(rng, n);
            match self.newton_solve(&s, u0) {
                Ok(sol) => {
                    iterations += sol.iterations;
                    samples.push(sol.u);
                }
                Err(_) => failures += 1,
            }
        }
        if failures * 20 > m_samples {
            return Err(Error::Approximation(format!("{failures} of {m_samples} Monte Carlo solves failed")));
        }
        let count = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(n), |acc, s| acc + s) / count;
        let mut cov = DMatrix::zeros(n, n);
        for s in &samples {
            let d = s - &mean;
            cov.ger(1.0 / (count - 1.0), &d, &d, 1.0);
        }
        symmetrize(&mut cov);
        let cov = checked_with_jitter(cov, "Monte Carlo")?;
        GaussApprox::from_moments(ApproxMethod::Mc, mean, cov, iterations)
    }

    /// Linear interpolant coefficients of `L²`-projected forcing `c = M⁻¹ b` on
    /// free nodes (constrained nodes set to zero).
    pub fn forcing_coefficients(&self, mass: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        forcing_coefficients(&self.mesh, mass, b)
    }
}

/// `c = M_ff⁻¹ b_f` on free nodes, zero on boundary nodes.
pub fn forcing_coefficients(mesh: &Mesh, mass: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let free = mesh.free_nodes();
    let m = mass.select_rows(&free).select_columns(&free);
    let bf = DVector::from_iterator(free.len(), free.iter().map(|&i| b[i]));
    let cf = cholesky(&m, "mass matrix")?.solve(&bf);
    let mut c = DVector::zeros(b.len());
    for (k, &i) in free.iter().enumerate() {
        c[i] = cf[k];
    }
    Ok(c)
}

/// PSD check (eigenvalues ≥ −1e−10) followed by a `1e−10·tr(C)/n` nugget.
fn checked_with_jitter(mut cov: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let (min, _) = extreme_eigenvalues(&cov);
    if min < -1e-10 {
        return Err(Error::Approximation(format!("{what} covariance is indefinite (eigenvalue {min:e})")));
    }
    let jitter = 1e-10 * cov.trace() / n as f64;
    for i in 0..n {
        cov[(i, i)] += jitter;
    }
    Ok(cov)
}

/// Gaussian approximation `N(m, C)` of the nonlinear statFEM prior, stored
/// with a precision root `B` (`BᵀB = C⁻¹`) and information vector `C⁻¹m`.
#[derive(Debug, Clone)]
pub struct GaussApprox {
    pub method: ApproxMethod,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub root: DMatrix<f64>,
    pub info: DVector<f64>,
    pub newton_iterations: usize,
}

impl GaussApprox {
    fn from_moments(method: ApproxMethod, mean: DVector<f64>, cov: DMatrix<f64>, newton_iterations: usize) -> Result<Self> {
        let l = cholesky(&cov, "approximate covariance")?.l();
        let n = l.nrows();
        let root = solve_lower(&l, &DMatrix::identity(n, n))?;
        let info = root.tr_mul(&(&root * &mean));
        Ok(Self { method, mean, cov, root, info, newton_iterations })
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let mut p = self.root.tr_mul(&self.root);
        symmetrize(&mut p);
        p
    }
}

/// Per-run statistics of the approximation refreshes.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RefreshStats {
    pub method: String,
    pub refresh_stride: usize,
    pub refreshes: usize,
    pub newton_iterations_total: usize,
    pub newton_iterations_max: usize,
    pub refresh_seconds_total: f64,
    pub refresh_seconds_mean: f64,
}

/// Forcing target whose particle prior is a refreshed Gaussian approximation.
pub struct NonlinearForcingTarget<'a> {
    sys: &'a NonlinearSystem,
    method: ApproxMethod,
    stride: usize,
    obs_info: DVector<f64>,
    obs_prec: DMatrix<f64>,
    approx: Option<GaussApprox>,
    p_u: Option<SpdOperator>,
    rng: ChaCha8Rng,
    pub stats: RefreshStats,
}

impl<'a> NonlinearForcingTarget<'a> {
    pub fn new(sys: &'a NonlinearSystem, y: &DVector<f64>, method: ApproxMethod, stride: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            sys,
            method,
            stride,
            obs_info: sys.observation_information(y),
            obs_prec: sys.observation_precision(),
            approx: None,
            p_u: None,
            rng,
            stats: RefreshStats { method: method.name().to_string(), refresh_stride: stride, ..Default::default() },
        }
    }
}

impl ForcingTarget for NonlinearForcingTarget<'_> {
    fn n_u(&self) -> usize {
        self.sys.n_u()
    }

    fn refresh(&mut self, b: &DVector<f64>, k: usize) -> Result<()> {
        if self.approx.is_some() && (k - 1) % self.stride != 0 {
            return Ok(());
        }
        let start = Instant::now();
        let u0 = match &self.approx {
            Some(a) => a.mean.clone(),
            None => DVector::zeros(self.sys.n_u()),
        };
        let approx = match self.method {
            ApproxMethod::Fot => self.sys.approx_fot(b, &u0)?,
            ApproxMethod::Ut => self.sys.approx_ut(b, &u0)?,
            ApproxMethod::Mc => self.sys.approx_mc(b, &u0, &mut self.rng)?,
        };
        self.p_u = Some(solution_preconditioner(&approx.root, &self.obs_prec)?);
        let s = &mut self.stats;
        s.refreshes += 1;
        s.newton_iterations_total += approx.newton_iterations;
        s.newton_iterations_max = s.newton_iterations_max.max(approx.newton_iterations);
        s.refresh_seconds_total += start.elapsed().as_secs_f64();
        s.refresh_seconds_mean = s.refresh_seconds_total / s.refreshes as f64;
        self.approx = Some(approx);
        Ok(())
    }

    fn noise_factor(&self) -> &DMatrix<f64> {
        self.p_u.as_ref().expect("refresh runs before the first step").factor()
    }

    fn particle_target(&self, _b: &DVector<f64>) -> Result<DVector<f64>> {
        let approx = self.approx.as_ref().ok_or_else(|| Error::numerical("approximation not built"))?;
        let p_u = self.p_u.as_ref().ok_or_else(|| Error::numerical("preconditioner not built"))?;
        Ok(p_u.apply(&(&approx.info + &self.obs_info)))
    }

    fn mean_forward(&self, particles: &DMatrix<f64>, order: &[usize]) -> Result<DVector<f64>> {
        if let DiffusivityLaw::Constant = self.sys.law {
            let mut f = &self.sys.stiffness * ordered_mean(particles, order);
            if self.sys.has_lift() {
                f += &self.sys.lift;
            }
            return Ok(f);
        }
        let mut acc = DVector::zeros(self.sys.n_u());
        for &j in order {
            acc += self.sys.residual(&particles.column(j).into_owned())?;
        }
        Ok(acc / order.len() as f64)
    }
}

/// Output of a nonlinear forcing run.
#[derive(Debug, Clone)]
pub struct NonlinearRun {
    pub trace: Trace,
    pub stats: RefreshStats,
}

/// Preconditioned particle forcing estimation for the nonlinear model, with
/// the particle prior replaced by the chosen Gaussian approximation.
pub fn nonlinear_ipla_run(
    sys: &NonlinearSystem,
    y: &DVector<f64>,
    method: ApproxMethod,
    config: &IplaConfig,
) -> Result<NonlinearRun> {
    config.validate()?;
    if y.len() != sys.n_y() {
        return Err(Error::invalid("observation vector has the wrong length"));
    }
    let stride = config.refresh_stride.unwrap_or_else(|| method.default_refresh_stride());
    let pre = forcing_preconditioner(&sys.g, sys.forcing_prior.cov())?;
    let mut target = NonlinearForcingTarget::new(sys, y, method, stride, config.seed);
    let trace = run_forcing_iterations(&mut target, &pre, sys.forcing_prior.mean(), config, None)?;
    if trace.iterations == 0 {
        if let Some((_, msg)) = &trace.failure {
            return Err(Error::Approximation(msg.clone()));
        }
    }
    Ok(NonlinearRun { trace, stats: target.stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_load, interval_observation_points};
    use crate::gp::{assemble_error_covariance, assemble_forcing_prior, solve_laplacian_eigs, SeKernel};
    use crate::mesh::build_interval_mesh;

    fn system(n: usize, law: DiffusivityLaw, inhomogeneous: bool) -> NonlinearSystem {
        let mesh = build_interval_mesh(n).unwrap();
        let pts = interval_observation_points(4);
        let fem = FemSystem::homogeneous(mesh.clone(), |_| 0.0, &pts).unwrap();
        let eigs = solve_laplacian_eigs(&fem, n - 2).unwrap();
        let k = SeKernel::new(1.0, 0.1, 1).unwrap();
        let g = assemble_error_covariance(&fem, &eigs, &k, 1e-4);
        let prior = assemble_forcing_prior(&fem, |_| 0.0, &k, &eigs, 1e-4).unwrap();
        let bc = if inhomogeneous {
            DirichletSpec { values: [(0, 0.0), (n - 1, 1.0)].into_iter().collect() }
        } else {
            DirichletSpec::homogeneous(&mesh)
        };
        let r = DMatrix::identity(4, 4) * 1e-4;
        NonlinearSystem::new(&fem, law, bc, g, &r, prior).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standard_normal(&mut rng, n)
    }

    #[test]
    fn constant_law_residual_is_stiffness_action() {
        let s = system(11, DiffusivityLaw::Constant, false);
        let quad = NonlinearSystem { law: DiffusivityLaw::Custom { q: Arc::new(|_| 1.0), dq: Arc::new(|_| 0.0) }, ..s.clone() };
        let mut u = random_vec(11, 1);
        u[0] = 0.0;
        u[10] = 0.0;
        let a = s.residual(&u).unwrap();
        let b = quad.residual(&u).unwrap();
        assert!((a - b).amax() < 1e-10);
        assert_eq!(s.residual(&DVector::zeros(11)).unwrap().amax(), 0.0);
    }

    #[test]
    fn zero_state_has_zero_residual_and_linear_jacobian() {
        let s = system(9, DiffusivityLaw::OnePlusSquare, false);
        assert_eq!(s.residual(&DVector::zeros(9)).unwrap().amax(), 0.0);
        let j = s.jacobian(&DVector::zeros(9)).unwrap();
        assert!((j - &s.stiffness).amax() < 1e-12);
    }

    #[test]
    fn manufactured_identity_solution() {
        // u*(x) = x with q = 1 + u² gives f = −((1 + x²))' = −2x
        let n = 17;
        let s = system(n, DiffusivityLaw::OnePlusSquare, true);
        let u_star = DVector::from_fn(n, |i, _| s.mesh.nodes()[i][0]);
        let mut b = assemble_load(&s.mesh, |x| -2.0 * x[0]).unwrap();
        b[0] = 0.0;
        b[n - 1] = 0.0;
        let f = s.residual(&u_star).unwrap();
        for i in 1..n - 1 {
            assert!((f[i] - b[i]).abs() < 1e-8, "row {i}: {} vs {}", f[i], b[i]);
        }
        let sol = s.newton_solve(&b, &DVector::zeros(n)).unwrap();
        assert!((sol.u - u_star).amax() < 1e-9);
    }

    #[test]
    fn jacobian_matches_directional_differences() {
        let s = system(10, DiffusivityLaw::OnePlusSquare, true);
        for seed in 0..10 {
            let u = random_vec(10, seed);
            let d = random_vec(10, seed + 100);
            let eps = 1e-5;
            let fd = (s.residual(&(&u + &d * eps)).unwrap() - s.residual(&(&u - &d * eps)).unwrap()) / (2.0 * eps);
            let jd = s.jacobian(&u).unwrap() * &d;
            assert!((&fd - &jd).norm() <= 1e-5 * jd.norm(), "seed {seed}");
        }
    }

    #[test]
    fn jacobian_is_not_symmetric() {
        let s = system(8, DiffusivityLaw::OnePlusSquare, false);
        let j = s.jacobian(&random_vec(8, 3)).unwrap();
        assert!((&j - j.transpose()).amax() > 1e-6);
    }

    #[test]
    fn newton_linear_case_takes_one_step() {
        let s = system(12, DiffusivityLaw::Constant, false);
        let mut b = random_vec(12, 4);
        b[0] = 0.0;
        b[11] = 0.0;
        let sol = s.newton_solve(&b, &DVector::zeros(12)).unwrap();
        assert_eq!(sol.iterations, 1);
        let direct = s.stiffness.clone().lu().solve(&b).unwrap();
        assert!((sol.u - direct).amax() < 1e-12);
        let zero = system(12, DiffusivityLaw::OnePlusSquare, false).newton_solve(&DVector::zeros(12), &DVector::zeros(12)).unwrap();
        assert_eq!(zero.u.amax(), 0.0);
    }

    #[test]
    fn newton_reports_non_convergence() {
        let mut s = system(12, DiffusivityLaw::OnePlusSquare, false);
        s.newton.max_iter = 1;
        let b = random_vec(12, 5) * 50.0;
        match s.newton_solve(&b, &DVector::zeros(12)) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fot_with_constant_law_is_linear_prior() {
        let s = system(10, DiffusivityLaw::Constant, false);
        let mut b = random_vec(10, 6);
        b[0] = 0.0;
        b[9] = 0.0;
        let a = s.fot_check(&b);
        let ai = s.stiffness.clone().try_inverse().unwrap();
        assert!((&a.mean - &ai * &b).amax() < 1e-10);
        let c = &ai * &s.g * ai.transpose();
        assert!((&a.cov - &c).amax() < 1e-10 * c.amax());
        let id = a.precision() * &a.cov;
        assert!((id - DMatrix::identity(10, 10)).amax() < 1e-6);
    }

    impl NonlinearSystem {
        fn fot_check(&self, b: &DVector<f64>) -> GaussApprox {
            self.approx_fot(b, &DVector::zeros(self.n_u())).unwrap()
        }
    }

    #[test]
    fn ut_weights_by_substitution() {
        let (lambda, w0, wj, w0c) = ut_weights(2, &UtParams::default());
        assert!((lambda - (2e-6 - 2.0)).abs() < 1e-15);
        // n + λ = 2e−6 is formed by cancellation, so only relative accuracy holds
        assert!((wj - 2.5e5).abs() < 1e-8 * 2.5e5);
        assert!((w0 + 2.0 * 2.0 * wj - 1.0).abs() < 1e-9);
        assert!((w0c - (w0 + 3.0 - 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn ut_exact_for_linear_map() {
        let s = system(9, DiffusivityLaw::Constant, false);
        let mut b = random_vec(9, 7);
        b[0] = 0.0;
        b[8] = 0.0;
        let a = s.approx_ut(&b, &DVector::zeros(9)).unwrap();
        let ai = s.stiffness.clone().try_inverse().unwrap();
        assert!((&a.mean - &ai * &b).amax() < 1e-8);
        let c = &ai * &s.g * ai.transpose();
        assert!((&a.cov - &c).amax() < 1e-6 * c.amax());
    }

    #[test]
    fn mc_mean_within_standard_errors_for_linear_map() {
        let mut s = system(7, DiffusivityLaw::Constant, false);
        s.mc_samples = 10_000;
        let mut b = random_vec(7, 8);
        b[0] = 0.0;
        b[6] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = s.approx_mc(&b, &DVector::zeros(7), &mut rng).unwrap();
        let ai = s.stiffness.clone().try_inverse().unwrap();
        let exact = &ai * &b;
        let cov = &ai * &s.g * ai.transpose();
        for i in 1..6 {
            let se = (cov[(i, i)] / 10_000.0).sqrt();
            assert!((a.mean[i] - exact[i]).abs() < 3.0 * se, "node {i}");
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let again = s.approx_mc(&b, &DVector::zeros(7), &mut rng2).unwrap();
        assert_eq!(a.mean, again.mean);
    }

    #[test]
    fn mc_with_two_samples_is_rank_one() {
        let mut s = system(7, DiffusivityLaw::OnePlusSquare, false);
        s.mc_samples = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = s.approx_mc(&DVector::zeros(7), &DVector::zeros(7), &mut rng).unwrap();
        let jitter = 1e-10 * (a.cov.trace() / (1.0 + 7.0 * 1e-10)) / 7.0;
        let mut raw = a.cov.clone();
        for i in 0..7 {
            raw[(i, i)] -= jitter;
        }
        let eig = raw.symmetric_eigenvalues();
        let big = eig.iter().filter(|v| v.abs() > 1e-8 * eig.amax()).count();
        assert!(big <= 1);
    }

    #[test]
    fn weak_nonlinearity_approximations_agree() {
        let mut s = system(9, DiffusivityLaw::OnePlusSquare, false);
        s.mc_samples = 10_000;
        let b = assemble_load(&s.mesh, |x| 1e-3 * (std::f64::consts::PI * x[0]).sin()).unwrap();
        let mut b = b;
        b[0] = 0.0;
        b[8] = 0.0;
        let z = DVector::zeros(9);
        let fot = s.approx_fot(&b, &z).unwrap();
        let ut = s.approx_ut(&b, &z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mc = s.approx_mc(&b, &z, &mut rng).unwrap();
        let scale = fot.mean.amax();
        assert!((&ut.mean - &fot.mean).amax() < 0.01 * scale);
        // the MC mean carries sampling noise of the prior spread
        let se = (fot.cov.diagonal().amax() / 10_000.0).sqrt();
        assert!((&mc.mean - &fot.mean).amax() < 0.02 * scale + 4.0 * se);
        let rel = (&mc.cov - &fot.cov).norm() / fot.cov.norm();
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn forcing_coefficients_recover_projection() {
        let s = system(33, DiffusivityLaw::OnePlusSquare, false);
        let fem = FemSystem::assemble(s.mesh.clone(), |x| (std::f64::consts::PI * x[0]).sin(), &[]).unwrap();
        let c = forcing_coefficients(&s.mesh, &fem.mass, &fem.load).unwrap();
        for i in 1..32 {
            let x = s.mesh.nodes()[i][0];
            assert!((c[i] - (std::f64::consts::PI * x).sin()).abs() < 0.05);
        }
    }
}

//! Langevin samplers: ULA and interacting particle Langevin algorithms for
//! forcing and diffusivity estimation.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_vec, standard_normal, SpdOperator};
use crate::linear::{convexity_constants, solution_preconditioner, ForcingPreconditioner, LinearModel};

fn default_threshold() -> f64 {
    1e8
}

fn default_true() -> bool {
    true
}

fn default_plateau_tol() -> f64 {
    1e-4
}

/// Run settings shared by all particle samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IplaConfig {
    pub step_size: f64,
    pub n_particles: usize,
    pub n_iters: usize,
    #[serde(default)]
    pub warm_start_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub preconditioned: bool,
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    /// Record every this many iterations; `None` picks 10 for vector
    /// parameters and 1 for scalar ones.
    #[serde(default)]
    pub trace_stride: Option<usize>,
    /// Rebuild state-dependent preconditioners every this many iterations.
    #[serde(default)]
    pub refresh_stride: Option<usize>,
    /// Stop early once window means of the drift norm change by less than
    /// `plateau_tol` relative between consecutive windows.
    #[serde(default)]
    pub plateau_window: Option<usize>,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
    /// Warn when the step size exceeds `2/(μ+L)`.
    #[serde(default = "default_true")]
    pub check_step_size: bool,
}

impl Default for IplaConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            n_particles: 16,
            n_iters: 10_000,
            warm_start_len: 0,
            seed: 0,
            preconditioned: true,
            divergence_threshold: 1e8,
            trace_stride: None,
            refresh_stride: None,
            plateau_window: None,
            plateau_tol: 1e-4,
            check_step_size: true,
        }
    }
}

impl IplaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.n_particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        if self.n_iters == 0 {
            return Err(Error::invalid("need at least one iteration"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence threshold must be positive"));
        }
        if self.trace_stride == Some(0) || self.refresh_stride == Some(0) || self.plateau_window == Some(0) {
            return Err(Error::invalid("strides and windows must be at least 1"));
        }
        Ok(())
    }
}

/// Particle cloud (one column per particle), current parameter and step count.
/// Each particle owns an RNG stream id, so permuting particles together
/// with their streams permutes the run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub particles: DMatrix<f64>,
    pub param: DVector<f64>,
    pub iter: usize,
    pub streams: Vec<u64>,
}

impl ParticleSystem {
    /// Zero particles with streams `1..=n_particles`.
    pub fn new(n_u: usize, n_particles: usize, param: DVector<f64>) -> Self {
        Self {
            particles: DMatrix::zeros(n_u, n_particles),
            param,
            iter: 0,
            streams: (1..=n_particles as u64).collect(),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.particles.ncols()
    }

    /// Column indices in ascending stream order; every reduction over
    /// particles runs in this order.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_particles()).collect();
        idx.sort_by_key(|&i| self.streams[i]);
        idx
    }

    pub fn mean(&self) -> DVector<f64> {
        ordered_mean(&self.particles, &self.order())
    }

    /// Per-node empirical variance across particles (`N − 1` denominator,
    /// zero for a single particle).
    pub fn variance(&self) -> DVector<f64> {
        let n = self.n_particles();
        let mean = self.mean();
        let mut var = DVector::zeros(self.particles.nrows());
        if n < 2 {
            return var;
        }
        for j in self.order() {
            let d = self.particles.column(j) - &mean;
            var += d.component_mul(&d);
        }
        var / (n - 1) as f64
    }

    /// Permutes particles and their streams together.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let particles = DMatrix::from_fn(self.particles.nrows(), perm.len(), |i, j| self.particles[(i, perm[j])]);
        Self {
            particles,
            param: self.param.clone(),
            iter: self.iter,
            streams: perm.iter().map(|&p| self.streams[p]).collect(),
        }
    }
}

/// Column mean summed in the given order.
pub fn ordered_mean(m: &DMatrix<f64>, order: &[usize]) -> DVector<f64> {
    let mut acc = DVector::zeros(m.nrows());
    for &j in order {
        acc += m.column(j);
    }
    acc / order.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Divergence {
    Stable,
    Diverged,
}

/// Diverged iff any entry is non-finite or exceeds `threshold` in magnitude.
pub fn detect_divergence(state: &ParticleSystem, threshold: f64) -> Divergence {
    let bad = |v: f64| !v.is_finite() || v.abs() > threshold;
    if state.particles.iter().any(|&v| bad(v)) || state.param.iter().any(|&v| bad(v)) {
        Divergence::Diverged
    } else {
        Divergence::Stable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub param: Vec<f64>,
    pub grad_norm: f64,
    pub particle_mean_norm: f64,
    pub particle_var_mean: f64,
}

/// Thinned run history plus the final state.
#[derive(Debug, Clone)]
pub struct Trace {
    pub stride: usize,
    pub records: Vec<TraceRecord>,
    pub final_state: ParticleSystem,
    pub diverged_at: Option<usize>,
    /// Error that stopped the run early, with the iteration it occurred at.
    pub failure: Option<(usize, String)>,
    /// Iterations actually performed.
    pub iterations: usize,
}

impl Trace {
    fn new(stride: usize, state: ParticleSystem) -> Self {
        Self { stride, records: Vec::new(), final_state: state, diverged_at: None, failure: None, iterations: 0 }
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn param_dim(&self) -> usize {
        self.final_state.param.len()
    }

    fn record(&mut self, state: &ParticleSystem, grad_norm: f64, with_particles: bool) {
        let (mean_norm, var_mean) = if with_particles && state.particles.len() > 0 {
            (state.mean().norm(), state.variance().mean())
        } else {
            (0.0, 0.0)
        };
        self.records.push(TraceRecord {
            iter: state.iter,
            param: state.param.iter().copied().collect(),
            grad_norm,
            particle_mean_norm: mean_norm,
            particle_var_mean: var_mean,
        });
    }

    /// CSV with header `iter,param_0..,grad_norm,particle_mean_norm,particle_var_mean`
    /// and a trailing `# diverged at iter=<k>` line for diverged runs.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["iter".to_string()];
            header.extend((0..self.param_dim()).map(|i| format!("param_{i}")));
            header.extend(["grad_norm", "particle_mean_norm", "particle_var_mean"].map(String::from));
            w.write_record(&header)?;
            for r in &self.records {
                let mut row = vec![r.iter.to_string()];
                row.extend(r.param.iter().map(|v| v.to_string()));
                row.push(r.grad_norm.to_string());
                row.push(r.particle_mean_norm.to_string());
                row.push(r.particle_var_mean.to_string());
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        if let Some(k) = self.diverged_at {
            writeln!(out, "# diverged at iter={k}")?;
        }
        Ok(())
    }
}

fn should_record(k: usize, total: usize, stride: usize) -> bool {
    k % stride == 0 || k == total
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal matrix whose column `j` comes from `rngs[j]`.
fn particle_noise(rngs: &mut [ChaCha8Rng], n: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, rngs.len());
    for (j, rng) in rngs.iter_mut().enumerate() {
        for i in 0..n {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    z
}

/// Plateau detector on window means of a scalar sequence.
struct Plateau {
    window: usize,
    tol: f64,
    sum: f64,
    count: usize,
    prev: Option<f64>,
}

impl Plateau {
    fn new(window: Option<usize>, tol: f64) -> Option<Self> {
        window.map(|window| Self { window, tol, sum: 0.0, count: 0, prev: None })
    }

    fn push(&mut self, v: f64) -> bool {
        self.sum += v;
        self.count += 1;
        if self.count < self.window {
            return false;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        let done = matches!(self.prev, Some(p) if ((mean - p) / p).abs() < self.tol);
        self.prev = Some(mean);
        done
    }
}

/// Unadjusted Langevin algorithm
/// `x ← x − γ P ∇U(x) + √(2γ) F ζ` with `F Fᵀ = P` (`P = I` when absent).
/// Records `x` every `stride` iterations.
#[allow(clippy::too_many_arguments)]
pub fn ula_run<S>(
    score: S,
    x0: &DVector<f64>,
    step_size: f64,
    n_iters: usize,
    seed: u64,
    precond: Option<&SpdOperator>,
    stride: usize,
    threshold: f64,
) -> Result<Trace>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(step_size > 0.0) || stride == 0 {
        return Err(Error::invalid("step size and stride must be positive"));
    }
    if let Some(p) = precond {
        if p.dim() != x0.len() {
            return Err(Error::invalid("preconditioner dimension does not match the state"));
        }
    }
    let mut rng = stream_rng(seed, 0);
    let mut state = ParticleSystem::new(0, 0, x0.clone());
    state.streams.clear();
    let mut trace = Trace::new(stride, state.clone());
    let noise_scale = (2.0 * step_size).sqrt();
    for k in 1..=n_iters {
        let grad = score(&state.param);
        if grad.len() != x0.len() {
            return Err(Error::invalid("score dimension does not match the state"));
        }
        let zeta = standard_normal(&mut rng, x0.len());
        let (drift, noise) = match precond {
            Some(p) => (p.apply(&grad), p.factor() * zeta),
            None => (grad, zeta),
        };
        state.param = &state.param - drift * step_size + noise * noise_scale;
        state.iter = k;
        trace.iterations = k;
        let grad_norm = score(&state.param).norm();
        if should_record(k, n_iters, stride) {
            trace.record(&state, grad_norm, false);
        }
        if detect_divergence(&state, threshold) == Divergence::Diverged {
            trace.diverged_at = Some(k);
            break;
        }
    }
    trace.final_state = state;
    Ok(trace)
}

/// Model side of the preconditioned forcing iteration
/// `b ← (1−γ)b + γ(W_G F̄ + W_Σ μ) + √(2γ/N) L_b ζ`,
/// `u ← (1−γ)u + γ c(b) + √(2γ) F ζ`.
pub trait ForcingTarget {
    fn n_u(&self) -> usize;

    /// Brings state-dependent quantities up to date before iteration `k`.
    fn refresh(&mut self, b: &DVector<f64>, k: usize) -> Result<()>;

    /// Noise factor `F` of the particle preconditioner, `F Fᵀ = P_u`.
    fn noise_factor(&self) -> &DMatrix<f64>;

    /// Fixed point `c(b) = P_u(η(b) + HᵀR⁻¹y)` of the particle update.
    fn particle_target(&self, b: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(1/N) Σ_n F(u_n)`, reduced in `order`.
    fn mean_forward(&self, particles: &DMatrix<f64>, order: &[usize]) -> Result<DVector<f64>>;
}

/// Shared driver for preconditioned forcing estimation; the linear and
/// nonlinear models differ only in their [`ForcingTarget`].
pub fn run_forcing_iterations<T: ForcingTarget>(
    target: &mut T,
    pre: &ForcingPreconditioner,
    prior_mean: &DVector<f64>,
    config: &IplaConfig,
    initial: Option<ParticleSystem>,
) -> Result<Trace> {
    config.validate()?;
    let n = target.n_u();
    let mut state = initial.unwrap_or_else(|| ParticleSystem::new(n, config.n_particles, prior_mean.clone()));
    if state.particles.nrows() != n || state.param.len() != n {
        return Err(Error::invalid("initial particle system has the wrong dimension"));
    }
    let n_particles = state.n_particles() as f64;
    let gamma = config.step_size;
    let stride = config.trace_stride.unwrap_or(10);
    let mut param_rng = stream_rng(config.seed, 0);
    let mut rngs: Vec<ChaCha8Rng> = state.streams.iter().map(|&s| stream_rng(config.seed, s)).collect();
    let prior_part = &pre.weight_sigma * prior_mean;
    let b_scale = (2.0 * gamma / n_particles).sqrt();
    let u_scale = (2.0 * gamma).sqrt();
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_tol);
    let mut trace = Trace::new(stride, state.clone());
    let order = state.order();

    for k in 1..=config.n_iters {
        if let Err(e) = target.refresh(&state.param, k) {
            trace.failure = Some((k, e.to_string()));
            break;
        }
        let step = target
            .particle_target(&state.param)
            .and_then(|c| Ok((c, target.mean_forward(&state.particles, &order)?)));
        let (c, fbar) = match step {
            Ok(v) => v,
            Err(e) => {
                trace.failure = Some((k, e.to_string()));
                break;
            }
        };
        let drift = &pre.weight_g * fbar + &prior_part - &state.param;
        let grad_norm = drift.norm();
        let zeta0 = standard_normal(&mut param_rng, n);
        state.param += drift * gamma + pre.p_b.factor() * zeta0 * b_scale;

        let z = particle_noise(&mut rngs, n);
        state.particles.scale_mut(1.0 - gamma);
        let shift = c * gamma;
        for mut col in state.particles.column_iter_mut() {
            col += &shift;
        }
        state.particles.gemm(u_scale, target.noise_factor(), &z, 1.0);
        state.iter += 1;
        trace.iterations = k;

        if should_record(k, config.n_iters, stride) {
            trace.record(&state, grad_norm, true);
        }
        if detect_divergence(&state, config.divergence_threshold) == Divergence::Diverged {
            trace.diverged_at = Some(k);
            trace.record(&state, grad_norm, true);
            break;
        }
        if let Some(p) = plateau.as_mut() {
            if p.push(grad_norm) {
                if !should_record(k, config.n_iters, stride) {
                    trace.record(&state, grad_norm, true);
                }
                break;
            }
        }
    }
    trace.final_state = state;
    Ok(trace)
}

/// Linear forcing target: `η(b) = A_θᵀ G⁻¹ b`, `F(u) = A_θ u`.
pub struct LinearForcingTarget {
    a: DMatrix<f64>,
    g_factor: DMatrix<f64>,
    root: DMatrix<f64>,
    p_u: SpdOperator,
    obs_info: DVector<f64>,
}

impl LinearForcingTarget {
    pub fn new(model: &LinearModel, y: &DVector<f64>) -> Result<Self> {
        let root = model.whitened_operator(model.theta)?;
        let p_u = solution_preconditioner(&root, &model.observation_precision())?;
        Ok(Self {
            a: model.a_theta(),
            g_factor: model.g_factor().clone(),
            root,
            p_u,
            obs_info: model.observation_information(y),
        })
    }

    pub fn p_u(&self) -> &SpdOperator {
        &self.p_u
    }
}

impl ForcingTarget for LinearForcingTarget {
    fn n_u(&self) -> usize {
        self.a.nrows()
    }

    fn refresh(&mut self, _b: &DVector<f64>, _k: usize) -> Result<()> {
        Ok(())
    }

    fn noise_factor(&self) -> &DMatrix<f64> {
        self.p_u.factor()
    }

    fn particle_target(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let eta = self.root.tr_mul(&solve_lower_vec(&self.g_factor, b)?);
        Ok(self.p_u.apply(&(eta + &self.obs_info)))
    }

    fn mean_forward(&self, particles: &DMatrix<f64>, order: &[usize]) -> Result<DVector<f64>> {
        Ok(&self.a * ordered_mean(particles, order))
    }
}

fn warn_on_step_size(model: &LinearModel, config: &IplaConfig) -> Result<()> {
    if !config.check_step_size {
        return Ok(());
    }
    let hess = model.hessian()?;
    let c = if config.preconditioned {
        let pre = model.build_preconditioners()?;
        convexity_constants(&hess, Some((&pre.p_u, &pre.p_b)))?
    } else {
        convexity_constants(&hess, None)?
    };
    let bound = 2.0 / (c.mu + c.l);
    if config.step_size > bound {
        warn!("step size {:e} exceeds 2/(mu+L) = {:e}", config.step_size, bound);
    }
    Ok(())
}

/// Forcing estimation for the linear model, preconditioned or plain
/// according to `config.preconditioned`. Particles start at zero and the
/// forcing at the prior mean.
pub fn ipla_forcing_run(model: &LinearModel, y: &DVector<f64>, config: &IplaConfig) -> Result<Trace> {
    ipla_forcing_run_from(model, y, config, None)
}

pub fn ipla_forcing_run_from(
    model: &LinearModel,
    y: &DVector<f64>,
    config: &IplaConfig,
    initial: Option<ParticleSystem>,
) -> Result<Trace> {
    config.validate()?;
    if y.len() != model.n_y() {
        return Err(Error::invalid("observation vector has the wrong length"));
    }
    warn_on_step_size(model, config)?;
    if config.preconditioned {
        let pre = model.forcing_preconditioner()?;
        let mut target = LinearForcingTarget::new(model, y)?;
        run_forcing_iterations(&mut target, &pre, model.forcing_prior.mean(), config, initial)
    } else {
        plain_forcing_run(model, y, config, initial)
    }
}

/// Unpreconditioned forcing iteration with explicit gradients.
fn plain_forcing_run(
    model: &LinearModel,
    y: &DVector<f64>,
    config: &IplaConfig,
    initial: Option<ParticleSystem>,
) -> Result<Trace> {
    let n = model.n_u();
    let mu = model.forcing_prior.mean().clone();
    let mut state = initial.unwrap_or_else(|| ParticleSystem::new(n, config.n_particles, mu.clone()));
    let n_particles = state.n_particles() as f64;
    let gamma = config.step_size;
    let stride = config.trace_stride.unwrap_or(10);
    let a = model.a_theta();
    let h = model.h().clone();
    let r_inv = model.r_inv().clone();
    let g_chol = cholesky(model.g(), "G")?;
    let s_chol = cholesky(model.forcing_prior.cov(), "Σ")?;
    let mut param_rng = stream_rng(config.seed, 0);
    let mut rngs: Vec<ChaCha8Rng> = state.streams.iter().map(|&s| stream_rng(config.seed, s)).collect();
    let b_scale = (2.0 * gamma / n_particles).sqrt();
    let u_scale = (2.0 * gamma).sqrt();
    let mut trace = Trace::new(stride, state.clone());
    let order = state.order();
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_tol);

    for k in 1..=config.n_iters {
        // W = G⁻¹(A U − b 1ᵀ)
        let mut resid = &a * &state.particles;
        for mut col in resid.column_iter_mut() {
            col -= &state.param;
        }
        let w = g_chol.solve(&resid);
        let mut obs = &h * &state.particles;
        for mut col in obs.column_iter_mut() {
            col -= y;
        }
        let grad_u = a.tr_mul(&w) + h.tr_mul(&(&r_inv * obs));
        let grad_b = s_chol.solve(&(&state.param - &mu)) - ordered_mean(&w, &order);
        let grad_norm = grad_b.norm();

        let zeta0 = standard_normal(&mut param_rng, n);
        state.param += grad_b * (-gamma) + zeta0 * b_scale;
        let z = particle_noise(&mut rngs, n);
        state.particles += grad_u * (-gamma) + z * u_scale;
        state.iter += 1;
        trace.iterations = k;

        if should_record(k, config.n_iters, stride) {
            trace.record(&state, grad_norm, true);
        }
        if detect_divergence(&state, config.divergence_threshold) == Divergence::Diverged {
            trace.diverged_at = Some(k);
            break;
        }
        if let Some(p) = plateau.as_mut() {
            if p.push(grad_norm) {
                break;
            }
        }
    }
    trace.final_state = state;
    Ok(trace)
}

/// Joint estimation of the log-diffusivity θ and the latent solution with a
/// known load `b`. The first `warm_start_len` iterations move only the
/// particles at `θ_0 = μ_θ`; the following `n_iters` iterations update θ
/// with the particle-averaged gradient and rebuild `P_u[θ]` every
/// `refresh_stride` iterations. θ is recorded at every recorded iteration;
/// iteration numbers count the warm start.
pub fn ipla_diffusivity_run(
    model: &LinearModel,
    y: &DVector<f64>,
    b_known: &DVector<f64>,
    config: &IplaConfig,
) -> Result<Trace> {
    config.validate()?;
    let n = model.n_u();
    if b_known.len() != n || y.len() != model.n_y() {
        return Err(Error::invalid("load or observation vector has the wrong length"));
    }
    let gamma = config.step_size;
    let total = config.warm_start_len + config.n_iters;
    let stride = config.trace_stride.unwrap_or(1);
    let refresh = config.refresh_stride.unwrap_or(1);
    let mut theta = model.theta_prior.mean;
    let mut state = ParticleSystem::new(n, config.n_particles, DVector::from_element(1, theta));
    let n_particles = state.n_particles() as f64;
    let order = state.order();
    let mut param_rng = stream_rng(config.seed, 0);
    let mut rngs: Vec<ChaCha8Rng> = state.streams.iter().map(|&s| stream_rng(config.seed, s)).collect();
    let mut trace = Trace::new(stride, state.clone());

    let a = model.a().clone();
    let h = model.h().clone();
    let r_inv = model.r_inv().clone();
    let g_factor = model.g_factor().clone();
    let obs_info = model.observation_information(y);
    let obs_prec = model.observation_precision();
    // L_G⁻¹ A and L_G⁻¹ b: the θ-dependence is a scalar factor e^θ
    let root0 = solve_lower(&g_factor, &a)?;
    let wb = solve_lower_vec(&g_factor, b_known)?;
    let eta0 = root0.tr_mul(&wb);
    let u_scale = (2.0 * gamma).sqrt();
    let theta_scale = (2.0 * gamma / n_particles).sqrt();

    let build = |theta: f64| -> Result<SpdOperator> { solution_preconditioner(&(&root0 * theta.exp()), &obs_prec) };
    let mut p_u = if config.preconditioned { Some(build(theta)?) } else { None };
    let mut built_at = theta;

    for k in 1..=total {
        let joint = k > config.warm_start_len;
        let kappa = theta.exp();
        if config.preconditioned && joint && built_at != theta && (k - config.warm_start_len - 1) % refresh == 0 {
            match build(theta) {
                Ok(p) => {
                    p_u = Some(p);
                    built_at = theta;
                }
                Err(e) => {
                    trace.failure = Some((k, e.to_string()));
                    trace.diverged_at = Some(k);
                    break;
                }
            }
        }

        // θ gradient from the current particles: (A_θu − b)ᵀG⁻¹A_θu = (κ L⁻¹A u − L⁻¹b)ᵀ κ L⁻¹A u
        let mut grad_theta = 0.0;
        if joint {
            let wu = &root0 * &state.particles * kappa;
            let mut acc = 0.0;
            for &j in &order {
                let col = wu.column(j);
                acc += (col - &wb).dot(&col);
            }
            grad_theta = model.theta_prior_drift(theta) + acc / n_particles;
        }

        let z = particle_noise(&mut rngs, n);
        match &p_u {
            Some(p) => {
                let c = p.apply(&(&eta0 * kappa + &obs_info));
                state.particles.scale_mut(1.0 - gamma);
                let shift = c * gamma;
                for mut col in state.particles.column_iter_mut() {
                    col += &shift;
                }
                state.particles.gemm(u_scale, p.factor(), &z, 1.0);
            }
            None => {
                let a_theta = &a * kappa;
                let mut resid = &a_theta * &state.particles;
                for mut col in resid.column_iter_mut() {
                    col -= b_known;
                }
                let w = solve_lower(&g_factor, &resid)?;
                let w = g_factor.tr_solve_lower_triangular(&w).ok_or_else(|| Error::numerical("singular factor of G"))?;
                let mut obs = &h * &state.particles;
                for mut col in obs.column_iter_mut() {
                    col -= y;
                }
                let grad_u = a_theta.tr_mul(&w) + h.tr_mul(&(&r_inv * obs));
                state.particles += grad_u * (-gamma) + z * u_scale;
            }
        }
        if joint {
            let zeta: f64 = param_rng.sample(StandardNormal);
            theta += -gamma * grad_theta + theta_scale * zeta;
        }
        state.param[0] = theta;
        state.iter = k;
        trace.iterations = k;

        if should_record(k, total, stride) {
            trace.record(&state, grad_theta.abs(), false);
        }
        if detect_divergence(&state, config.divergence_threshold) == Divergence::Diverged {
            trace.diverged_at = Some(k);
            break;
        }
    }
    trace.final_state = state;
    Ok(trace)
}

/// Largest step size (to 0.05 decades) for which `is_stable(γ, seed)` holds
/// for all `seeds`. The bracket is widened by decades when `γ_lo` is unstable
/// or `γ_hi` stable, down to `1e-30` and up to `1e6`.
pub fn max_stable_stepsize_with<F>(is_stable: F, gamma_lo: f64, gamma_hi: f64, seeds: &[u64]) -> Result<f64>
where
    F: Fn(f64, u64) -> Result<bool>,
{
    if !(gamma_lo > 0.0) || !(gamma_hi > gamma_lo) {
        return Err(Error::invalid(format!("invalid step-size bracket [{gamma_lo:e}, {gamma_hi:e}]")));
    }
    let stable = |g: f64| -> Result<bool> {
        for &s in seeds {
            if !is_stable(g, s)? {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let (mut lo, mut hi) = (gamma_lo.log10(), gamma_hi.log10());
    while !stable(10f64.powf(lo))? {
        hi = lo;
        lo -= 1.0;
        if lo < -30.0 {
            return Err(Error::numerical("no stable step size above 1e-30"));
        }
    }
    while stable(10f64.powf(hi))? {
        lo = hi;
        hi += 1.0;
        if hi > 6.0 {
            return Err(Error::numerical("sampler stable for every step size up to 1e6"));
        }
    }
    while hi - lo > 0.05 {
        let mid = 0.5 * (lo + hi);
        if stable(10f64.powf(mid))? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(10f64.powf(lo))
}

/// Maximum stable forcing-IPLA step size for `model`, using the template's
/// particle count, iteration budget and preconditioning flag over three seeds.
pub fn max_stable_stepsize(
    model: &LinearModel,
    y: &DVector<f64>,
    template: &IplaConfig,
    gamma_lo: f64,
    gamma_hi: f64,
) -> Result<f64> {
    let seeds = [template.seed, template.seed + 1, template.seed + 2];
    max_stable_stepsize_with(
        |gamma, seed| {
            let cfg = IplaConfig {
                step_size: gamma,
                seed,
                trace_stride: Some(template.n_iters),
                check_step_size: false,
                plateau_window: None,
                ..template.clone()
            };
            Ok(!ipla_forcing_run(model, y, &cfg)?.diverged())
        },
        gamma_lo,
        gamma_hi,
        &seeds,
    )
}

//! Experiment drivers behind the CLI subcommands. Every driver writes CSV
//! files plus a metadata JSON into `config.output_dir` and returns its
//! results for programmatic checks.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, KernelParams, ProblemId};
use crate::error::{Error, Result};
use crate::fem::{
    disc_observation_points, element_geometry, interval_observation_points, map_to_physical, quadrature_rule,
    DirichletSpec, FemSystem,
};
use crate::gp::{assemble_error_covariance, assemble_forcing_prior, default_rank, solve_laplacian_eigs, SeKernel};
use crate::linalg::{cholesky, standard_normal, SpdOperator};
use crate::linear::{convexity_constants, LinearModel};
use crate::mesh::{build_disc_mesh, build_interval_mesh, Mesh};
use crate::nonlinear::{forcing_coefficients, nonlinear_ipla_run, ApproxMethod, DiffusivityLaw, NonlinearSystem};
use crate::samplers::{ipla_diffusivity_run, ipla_forcing_run, max_stable_stepsize, IplaConfig, Trace};

pub type Forcing = Box<dyn Fn(&[f64; 2]) -> f64 + Send + Sync>;

/// True forcing of each problem.
pub fn true_forcing(problem: ProblemId) -> Forcing {
    match problem {
        ProblemId::Poisson1d => Box::new(|x| 5.0 * (6.0 * PI * x[0]).sin()),
        ProblemId::PoissonDisc => Box::new(|x| {
            let bump = |cx: f64, cy: f64| {
                let d2 = (x[0] - cx).powi(2) + (x[1] - cy).powi(2);
                100.0 * (-d2 / (2.0 * 0.2 * 0.2)).exp()
            };
            bump(-0.4, -0.4) + bump(0.4, 0.4)
        }),
        ProblemId::Diffusivity1d => Box::new(|x| 20.0 * (4.0 * PI * x[0]).sin()),
        ProblemId::Nonlinear1d => Box::new(|x| 10.0 * (2.0 * PI * x[0]).sin()),
    }
}

/// SplitMix64 finaliser over `(base, tag, index)`: independent job seeds.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_mesh(cfg: &ExperimentConfig) -> Result<Mesh> {
    if let Some(path) = &cfg.mesh_file {
        return Mesh::load(path);
    }
    match cfg.problem {
        ProblemId::PoissonDisc => build_disc_mesh(cfg.n_rings),
        _ => build_interval_mesh(cfg.n_nodes),
    }
}

fn observation_points(cfg: &ExperimentConfig) -> Vec<[f64; 2]> {
    match cfg.problem {
        ProblemId::PoissonDisc => disc_observation_points(cfg.n_y),
        _ => interval_observation_points(cfg.n_y),
    }
}

fn kernel(p: &KernelParams, dim: usize) -> Result<SeKernel> {
    SeKernel::new(p.amplitude, p.length_scale, dim)
}

struct Covariances {
    system: FemSystem,
    g: DMatrix<f64>,
    prior: crate::gp::GaussianDist,
}

fn covariances(cfg: &ExperimentConfig) -> Result<Covariances> {
    let mesh = build_mesh(cfg)?;
    let dim = mesh.dim();
    let system = FemSystem::homogeneous(mesh, true_forcing(cfg.problem), &observation_points(cfg))?;
    let n_free = system.mesh.free_nodes().len();
    let rank = cfg.rank.unwrap_or_else(|| default_rank(n_free, dim)).min(n_free);
    let eigs = solve_laplacian_eigs(&system, rank)?;
    let k = kernel(&cfg.misfit_kernel, dim)?;
    let kf = kernel(&cfg.forcing_kernel, dim)?;
    let g = assemble_error_covariance(&system, &eigs, &k, cfg.jitter * k.amplitude);
    let prior = assemble_forcing_prior(&system, |_| 0.0, &kf, &eigs, cfg.jitter * kf.amplitude)?;
    Ok(Covariances { system, g, prior })
}

/// Linear model of a linear problem plus its true load vector.
pub fn build_linear_model(cfg: &ExperimentConfig) -> Result<(LinearModel, DVector<f64>)> {
    if cfg.problem == ProblemId::Nonlinear1d {
        return Err(Error::invalid("nonlinear-1d has no linear model"));
    }
    let c = covariances(cfg)?;
    let b_true = c.system.load.clone();
    let r = LinearModel::isotropic_noise(cfg.n_y, cfg.sigma_y);
    let model = LinearModel::new(c.system, c.g, r, c.prior, cfg.theta_prior, cfg.theta_true)?;
    Ok((model, b_true))
}

/// Nonlinear problem data: system, true load and synthetic observations.
pub struct NonlinearProblem {
    pub system: NonlinearSystem,
    pub mass: DMatrix<f64>,
    pub b_true: DVector<f64>,
    pub u_true: DVector<f64>,
    pub y: DVector<f64>,
}

pub fn build_nonlinear_problem(cfg: &ExperimentConfig) -> Result<NonlinearProblem> {
    if cfg.problem != ProblemId::Nonlinear1d {
        return Err(Error::invalid("the nonlinear experiment needs problem nonlinear-1d"));
    }
    let c = covariances(cfg)?;
    let n = c.system.n_u();
    let bc = DirichletSpec { values: [(0, cfg.nonlinear.left_value), (n - 1, cfg.nonlinear.right_value)].into_iter().collect() };
    let r = LinearModel::isotropic_noise(cfg.n_y, cfg.sigma_y);
    let mut system = NonlinearSystem::new(&c.system, DiffusivityLaw::OnePlusSquare, bc, c.g, &r, c.prior)?;
    system.mc_samples = cfg.nonlinear.mc_samples;
    system.ut = cfg.nonlinear.ut;
    let b_true = c.system.load.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let g_factor = cholesky(system.g(), "model error covariance G")?.l();
    let e = &g_factor * standard_normal(&mut rng, n);
    let u_true = system.newton_solve(&(&b_true + e), &DVector::zeros(n))?.u;
    let y = system.h() * &u_true + standard_normal(&mut rng, cfg.n_y) * cfg.sigma_y;
    Ok(NonlinearProblem { system, mass: c.system.mass, b_true, u_true, y })
}

/// `‖c_h − f‖_{L²}` for the P1 function with nodal coefficients `c`, by
/// element quadrature.
pub fn l2_error_to_function<F>(mesh: &Mesh, c: &DVector<f64>, f: F) -> Result<f64>
where
    F: Fn(&[f64; 2]) -> f64,
{
    let rule = quadrature_rule(mesh.dim());
    let mut acc = 0.0;
    for e in 0..mesh.elements().len() {
        let geo = element_geometry(mesh, e)?;
        let elem = &mesh.elements()[e];
        for q in &rule {
            let ch: f64 = elem.iter().enumerate().map(|(k, &n)| q.bary[k] * c[n]).sum();
            let x = map_to_physical(mesh, e, &q.bary);
            acc += q.weight * geo.measure * (ch - f(&x)).powi(2);
        }
    }
    Ok(acc.sqrt())
}

/// `L²` distance between the forcing functions represented by two load
/// vectors: `√(dᵀ M_ff⁻¹ d)` over free nodes.
pub fn forcing_l2_distance(mesh: &Mesh, mass: &DMatrix<f64>, d: &DVector<f64>) -> Result<f64> {
    let c = forcing_coefficients(mesh, mass, d)?;
    Ok(c.dot(d).max(0.0).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct FitPoint {
    pub n: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_log_error: f64,
    pub count: usize,
}

/// Least-squares fit of `log e = log C − p log N`.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<FitPoint>,
}

/// Fits the decay order `p` to replicate errors `errors[i]` observed at `ns[i]`.
pub fn fit_order(ns: &[usize], errors: &[Vec<f64>]) -> Result<FitResult> {
    if ns.len() != errors.len() {
        return Err(Error::invalid("one error list per ladder point is required"));
    }
    if ns.len() < 3 {
        return Err(Error::invalid("at least three ladder points are required"));
    }
    let mut points = Vec::with_capacity(ns.len());
    for (&n, errs) in ns.iter().zip(errors) {
        if n == 0 || errs.is_empty() {
            return Err(Error::invalid("ladder points need N ≥ 1 and at least one error"));
        }
        if errs.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::invalid(format!("non-positive or non-finite error at N = {n}")));
        }
        let m = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / m;
        let se = if errs.len() > 1 {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
        } else {
            0.0
        };
        let mean_log = errs.iter().map(|e| e.ln()).sum::<f64>() / m;
        points.push(FitPoint { n, mean_error: mean, std_error: se, mean_log_error: mean_log, count: errs.len() });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_log_error).collect();
    let k = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("ladder points must not all coincide"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = -sxy / sxx;
    Ok(FitResult { slope, intercept: ym + slope * xm, points })
}

/// Output directory handling and the metadata sidecar.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    start: Instant,
}

impl Outputs {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.output_dir)?;
        Ok(Self { dir: cfg.output_dir.clone(), files: Vec::new(), start: Instant::now() })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn trace(&mut self, name: &str, trace: &Trace) -> Result<()> {
        let path = self.dir.join(name);
        trace.write_csv(BufWriter::new(File::create(&path)?))?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, command: &str, cfg: &ExperimentConfig, results: Value) -> Result<PathBuf> {
        let path = self.dir.join(format!("{command}.json"));
        let files: Vec<String> = self
            .files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let meta = json!({
            "command": command,
            "problem": cfg.problem.name(),
            "config": cfg,
            "seed": cfg.ipla.seed,
            "data_seed": cfg.data_seed,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
            "wall_clock_seconds": self.start.elapsed().as_secs_f64(),
            "outputs": files,
            "results": results,
        });
        fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn require_linear(cfg: &ExperimentConfig, allowed: &[ProblemId]) -> Result<()> {
    if allowed.contains(&cfg.problem) {
        Ok(())
    } else {
        Err(Error::invalid(format!("this experiment does not support problem {}", cfg.problem.name())))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub replicate: usize,
    pub n_particles: usize,
    pub iterations: usize,
    pub l2_error: f64,
    pub function_error: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceResult {
    pub coefficient_fit: FitResult,
    pub function_fit: FitResult,
    pub rows: Vec<ConvergenceRow>,
}

/// Error of the final forcing iterate against the analytic MMAP estimate over
/// a particle-count ladder, with fresh model error and noise per replicate.
pub fn cmd_convergence_order(cfg: &ExperimentConfig) -> Result<ConvergenceResult> {
    require_linear(cfg, &[ProblemId::Poisson1d, ProblemId::PoissonDisc])?;
    let mut out = Outputs::new(cfg)?;
    let (model, b_true) = build_linear_model(cfg)?;
    let reps: Vec<usize> = (0..cfg.replicates).collect();
    let rows: Vec<Vec<ConvergenceRow>> = reps
        .par_iter()
        .map(|&rep| -> Result<Vec<ConvergenceRow>> {
            let data = model.generate_data(&b_true, derive_seed(cfg.data_seed, 1, rep as u64))?;
            let b_star = model.analytic_mmap(&data.y)?;
            let mut rows = Vec::new();
            for &n in &cfg.particle_ladder {
                let run_cfg = IplaConfig {
                    n_particles: n,
                    seed: derive_seed(cfg.ipla.seed, rep as u64, n as u64),
                    trace_stride: Some(cfg.ipla.n_iters),
                    check_step_size: false,
                    ..cfg.ipla.clone()
                };
                let trace = ipla_forcing_run(&model, &data.y, &run_cfg)?;
                let d = &trace.final_state.param - &b_star;
                let function_error = forcing_l2_distance(&model.system.mesh, &model.system.mass, &d)?;
                info!("replicate {rep} N={n}: error {:.4e} after {} iterations", d.norm(), trace.iterations);
                rows.push(ConvergenceRow {
                    replicate: rep,
                    n_particles: n,
                    iterations: trace.iterations,
                    l2_error: d.norm(),
                    function_error,
                    diverged: trace.diverged() || trace.failure.is_some(),
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ConvergenceRow> = rows.into_iter().flatten().collect();
    let diverged = rows.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        warn!("{diverged} of {} runs diverged and are excluded", rows.len());
    }
    if diverged * 5 > rows.len() {
        return Err(Error::numerical(format!("{diverged} of {} runs diverged", rows.len())));
    }
    let collect = |f: fn(&ConvergenceRow) -> f64| -> Vec<Vec<f64>> {
        cfg.particle_ladder
            .iter()
            .map(|&n| rows.iter().filter(|r| r.n_particles == n && !r.diverged).map(f).collect())
            .collect()
    };
    let coefficient_fit = fit_order(&cfg.particle_ladder, &collect(|r| r.l2_error))?;
    let function_fit = fit_order(&cfg.particle_ladder, &collect(|r| r.function_error))?;

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.replicate.to_string(),
                r.n_particles.to_string(),
                r.iterations.to_string(),
                fmt(r.l2_error),
                fmt(r.function_error),
                r.diverged.to_string(),
            ]
        })
        .collect();
    out.csv(
        "convergence.csv",
        &["replicate", "n_particles", "iterations", "l2_error", "function_error", "diverged"],
        &table,
    )?;
    let fit_rows: Vec<Vec<String>> = coefficient_fit
        .points
        .iter()
        .zip(&function_fit.points)
        .map(|(a, b)| {
            vec![a.n.to_string(), fmt(a.mean_error), fmt(a.std_error), fmt(b.mean_error), fmt(b.std_error), a.count.to_string()]
        })
        .collect();
    out.csv(
        "convergence_fit.csv",
        &["n_particles", "mean_l2_error", "se_l2_error", "mean_function_error", "se_function_error", "count"],
        &fit_rows,
    )?;
    let max_iters = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
    let results = json!({
        "slope_l2": coefficient_fit.slope,
        "intercept_l2": coefficient_fit.intercept,
        "slope_function": function_fit.slope,
        "intercept_function": function_fit.intercept,
        "max_iterations": max_iters,
        "diverged_runs": diverged,
        "replicate_protocol": "fixed mesh and forcing, fresh model error and observation noise per replicate",
    });
    out.finish("convergence", cfg, results)?;
    Ok(ConvergenceResult { coefficient_fit, function_fit, rows })
}

#[derive(Debug, Clone)]
pub struct VarianceResult {
    pub n_particles: Vec<usize>,
    /// Mean absolute relative error of the particle variance over free nodes.
    pub mean_abs_rel_error: Vec<f64>,
    /// Standard error of that mean over nodes.
    pub std_error: Vec<f64>,
    pub analytic: DVector<f64>,
    pub p_u_diagonal: DVector<f64>,
    pub particle_variances: Vec<DVector<f64>>,
}

/// Nodal particle variance after a forcing run against the exact posterior
/// variance at the MMAP forcing.
pub fn cmd_posterior_variance(cfg: &ExperimentConfig) -> Result<VarianceResult> {
    require_linear(cfg, &[ProblemId::Poisson1d, ProblemId::PoissonDisc])?;
    let mut out = Outputs::new(cfg)?;
    let (model, b_true) = build_linear_model(cfg)?;
    let data = model.generate_data(&b_true, cfg.data_seed)?;
    let b_star = model.analytic_mmap(&data.y)?;
    let analytic = model.analytic_posterior(&b_star, &data.y)?.variance();
    let p_u = model.build_p_u(model.theta)?;
    let p_u_diagonal = p_u.matrix().diagonal();
    let free = model.system.mesh.free_nodes();

    let runs: Vec<(DVector<f64>, f64, f64)> = cfg
        .variance_particles
        .par_iter()
        .map(|&n| -> Result<(DVector<f64>, f64, f64)> {
            let run_cfg = IplaConfig {
                n_particles: n,
                seed: derive_seed(cfg.ipla.seed, 2, n as u64),
                trace_stride: Some(cfg.ipla.n_iters),
                check_step_size: false,
                plateau_window: None,
                ..cfg.ipla.clone()
            };
            let trace = ipla_forcing_run(&model, &data.y, &run_cfg)?;
            if trace.diverged() {
                return Err(Error::numerical(format!("run with N = {n} diverged")));
            }
            let v = trace.final_state.variance();
            let rel: Vec<f64> = free.iter().map(|&i| ((v[i] - analytic[i]) / analytic[i]).abs()).collect();
            let m = rel.len() as f64;
            let mean = rel.iter().sum::<f64>() / m;
            let se = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0) / m).sqrt();
            Ok((v, mean, se))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut header: Vec<String> = ["node", "x", "y", "analytic_variance", "p_u_variance"].map(String::from).to_vec();
    header.extend(cfg.variance_particles.iter().map(|n| format!("particle_variance_n{n}")));
    let rows: Vec<Vec<String>> = (0..model.n_u())
        .map(|i| {
            let x = model.system.mesh.nodes()[i];
            let mut row = vec![i.to_string(), fmt(x[0]), fmt(x[1]), fmt(analytic[i]), fmt(p_u_diagonal[i])];
            row.extend(runs.iter().map(|r| fmt(r.0[i])));
            row
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("posterior_variance.csv", &header_ref, &rows)?;
    let summary: Vec<Vec<String>> = cfg
        .variance_particles
        .iter()
        .zip(&runs)
        .map(|(n, r)| vec![n.to_string(), fmt(r.1), fmt(r.2)])
        .collect();
    out.csv("posterior_variance_summary.csv", &["n_particles", "mean_abs_rel_error", "std_error"], &summary)?;
    let result = VarianceResult {
        n_particles: cfg.variance_particles.clone(),
        mean_abs_rel_error: runs.iter().map(|r| r.1).collect(),
        std_error: runs.iter().map(|r| r.2).collect(),
        analytic,
        p_u_diagonal,
        particle_variances: runs.into_iter().map(|r| r.0).collect(),
    };
    let results = json!({
        "n_particles": result.n_particles,
        "mean_abs_rel_error": result.mean_abs_rel_error,
        "std_error": result.std_error,
    });
    out.finish("posterior-variance", cfg, results)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub length_scale: f64,
    pub n_nodes: usize,
    /// `log10` of the largest stable step without preconditioning.
    pub log10_gamma: f64,
    /// Same for the preconditioned sampler (NaN when not run).
    pub log10_gamma_preconditioned: f64,
    /// `log10(2/L)` from the Hessian spectrum.
    pub log10_two_over_l: f64,
}

/// Largest stable step size over a mesh-size × length-scale grid.
pub fn cmd_stability(cfg: &ExperimentConfig) -> Result<Vec<StabilityRow>> {
    require_linear(cfg, &[ProblemId::Poisson1d])?;
    let mut out = Outputs::new(cfg)?;
    let s = &cfg.stability;
    let mut grid = Vec::new();
    for &l in &s.length_scales {
        for &n in &s.n_nodes {
            grid.push((l, n));
        }
    }
    let rows = grid
        .par_iter()
        .map(|&(l, n)| -> Result<StabilityRow> {
            let mut c = cfg.clone();
            c.n_nodes = n;
            c.misfit_kernel.length_scale = l;
            let (model, b_true) = build_linear_model(&c)?;
            let data = model.generate_data(&b_true, cfg.data_seed)?;
            let template = IplaConfig {
                n_particles: s.n_particles,
                n_iters: s.n_iters,
                preconditioned: false,
                plateau_window: None,
                check_step_size: false,
                ..cfg.ipla.clone()
            };
            let plain = max_stable_stepsize(&model, &data.y, &template, s.gamma_lo, s.gamma_hi).map(f64::log10);
            let log10_gamma = match plain {
                Ok(v) => v,
                Err(Error::Numerical(msg)) => {
                    warn!("n={n} l={l}: {msg}");
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
            let log10_gamma_preconditioned = if s.preconditioned_rerun {
                let t = IplaConfig { preconditioned: true, ..template };
                max_stable_stepsize(&model, &data.y, &t, 1e-2, 1.0)?.log10()
            } else {
                f64::NAN
            };
            let hess = model.hessian()?;
            let constants = convexity_constants(&hess, None)?;
            info!("n={n} l={l}: log10 gamma {log10_gamma:.2}, preconditioned {log10_gamma_preconditioned:.2}");
            Ok(StabilityRow {
                length_scale: l,
                n_nodes: n,
                log10_gamma,
                log10_gamma_preconditioned,
                log10_two_over_l: (2.0 / constants.l).log10(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt(r.length_scale),
                r.n_nodes.to_string(),
                fmt(r.log10_gamma),
                fmt(r.log10_gamma_preconditioned),
                fmt(r.log10_two_over_l),
            ]
        })
        .collect();
    out.csv(
        "stability.csv",
        &["length_scale", "n_nodes", "log10_max_gamma", "log10_max_gamma_preconditioned", "log10_two_over_l"],
        &table,
    )?;
    out.finish("stability", cfg, serde_json::to_value(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionRow {
    pub n_nodes: usize,
    pub mu: f64,
    pub l: f64,
    pub kappa: f64,
    pub mu_p: f64,
    pub l_p: f64,
    pub kappa_p: f64,
    /// κ with identity preconditioners (control for the κ column).
    pub kappa_identity: f64,
}

/// Condition numbers of the joint potential with and without preconditioning.
pub fn cmd_condition_numbers(cfg: &ExperimentConfig) -> Result<Vec<ConditionRow>> {
    require_linear(cfg, &[ProblemId::Poisson1d, ProblemId::PoissonDisc])?;
    let mut out = Outputs::new(cfg)?;
    let sizes: Vec<usize> = match cfg.problem {
        ProblemId::PoissonDisc => vec![cfg.n_rings],
        _ => cfg.condition_nodes.clone(),
    };
    let mut rows = Vec::new();
    for n in sizes {
        let mut c = cfg.clone();
        match cfg.problem {
            ProblemId::PoissonDisc => c.n_rings = n,
            _ => c.n_nodes = n,
        }
        let (model, _) = build_linear_model(&c)?;
        let hess = model.hessian()?;
        let plain = convexity_constants(&hess, None)?;
        let pre = model.build_preconditioners()?;
        let pc = convexity_constants(&hess, Some((&pre.p_u, &pre.p_b)))?;
        let id = SpdOperator::identity(model.n_u());
        let ic = convexity_constants(&hess, Some((&id, &id)))?;
        info!("n={}: kappa {:.3e}, kappa_P {:.3}", model.n_u(), plain.kappa, pc.kappa);
        rows.push(ConditionRow {
            n_nodes: model.n_u(),
            mu: plain.mu,
            l: plain.l,
            kappa: plain.kappa,
            mu_p: pc.mu,
            l_p: pc.l,
            kappa_p: pc.kappa,
            kappa_identity: ic.kappa,
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_nodes.to_string(),
                fmt(r.mu),
                fmt(r.l),
                fmt(r.kappa),
                fmt(r.mu_p),
                fmt(r.l_p),
                fmt(r.kappa_p),
                fmt(r.kappa_identity),
            ]
        })
        .collect();
    out.csv("condition.csv", &["n_u", "mu", "l", "kappa", "mu_p", "l_p", "kappa_p", "kappa_identity"], &table)?;
    out.finish("condition", cfg, serde_json::to_value(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusivityRow {
    pub warm_start_len: usize,
    pub final_theta: f64,
    pub final_kappa: f64,
    /// Largest `θ_k − θ_0` over the first `excursion_window` joint iterations.
    pub max_early_excursion: f64,
    /// First iteration after which `|e^θ − 1| ≤ 0.2` holds for the rest of the run.
    pub settled_at: Option<usize>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct DiffusivityResult {
    pub rows: Vec<DiffusivityRow>,
    pub traces: Vec<Trace>,
}

const EXCURSION_WINDOW: usize = 1_000;

/// Joint θ / solution estimation for each configured warm-start length.
pub fn cmd_diffusivity(cfg: &ExperimentConfig) -> Result<DiffusivityResult> {
    require_linear(cfg, &[ProblemId::Diffusivity1d])?;
    let mut out = Outputs::new(cfg)?;
    let (model, b_true) = build_linear_model(cfg)?;
    let data = model.generate_data(&b_true, cfg.data_seed)?;
    let theta0 = cfg.theta_prior.mean;
    let traces = cfg
        .warm_starts
        .par_iter()
        .map(|&ws| {
            let run_cfg = IplaConfig { warm_start_len: ws, check_step_size: false, ..cfg.ipla.clone() };
            ipla_diffusivity_run(&model, &data.y, &b_true, &run_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&ws, trace) in cfg.warm_starts.iter().zip(&traces) {
        let joint = trace.records.iter().filter(|r| r.iter > ws);
        let max_early_excursion = joint
            .clone()
            .take_while(|r| r.iter <= ws + EXCURSION_WINDOW)
            .map(|r| r.param[0] - theta0)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut settled_at = None;
        for r in joint {
            let ok = (r.param[0].exp() - 1.0).abs() <= 0.2;
            match (ok, settled_at) {
                (true, None) => settled_at = Some(r.iter),
                (false, _) => settled_at = None,
                _ => {}
            }
        }
        let theta = trace.final_state.param[0];
        rows.push(DiffusivityRow {
            warm_start_len: ws,
            final_theta: theta,
            final_kappa: theta.exp(),
            max_early_excursion,
            settled_at,
            diverged: trace.diverged(),
        });
        out.trace(&format!("diffusivity_trace_ws{ws}.csv"), trace)?;
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.warm_start_len.to_string(),
                fmt(r.final_theta),
                fmt(r.final_kappa),
                fmt(r.max_early_excursion),
                r.settled_at.map(|k| k.to_string()).unwrap_or_default(),
                r.diverged.to_string(),
            ]
        })
        .collect();
    out.csv(
        "diffusivity.csv",
        &["warm_start_len", "final_theta", "final_kappa", "max_early_excursion", "settled_at", "diverged"],
        &table,
    )?;
    let particles_path = out.dir.join("diffusivity_particles.csv");
    if let Some(i) = cfg.warm_starts.iter().position(|&w| w == 1_000).or(Some(0)) {
        let state = &traces[i].final_state;
        let mut w = csv::Writer::from_path(&particles_path)?;
        let mut header = vec!["node".to_string(), "x".into(), "u_true".into()];
        header.extend((0..state.n_particles()).map(|j| format!("particle_{j}")));
        w.write_record(&header)?;
        for node in 0..model.n_u() {
            let mut row = vec![node.to_string(), fmt(model.system.mesh.nodes()[node][0]), fmt(data.u_true[node])];
            row.extend(state.particles.row(node).iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        out.files.push(particles_path);
    }
    out.finish("diffusivity", cfg, serde_json::to_value(&rows)?)?;
    Ok(DiffusivityResult { rows, traces })
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearRow {
    pub method: String,
    pub n_particles: usize,
    pub replicate: usize,
    /// `L²` error of the recovered forcing; NaN when the run failed.
    pub forcing_error: f64,
    pub wall_clock_seconds: f64,
    pub refreshes: usize,
    pub refresh_seconds_mean: f64,
    pub newton_iterations_total: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearSummary {
    pub method: String,
    pub n_particles: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub refresh_seconds_mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearResult {
    pub methods: Vec<NonlinearSummary>,
    pub sweep: Vec<NonlinearSummary>,
    pub rows: Vec<NonlinearRow>,
}

fn summarise(method: &str, n: usize, rows: &[&NonlinearRow]) -> NonlinearSummary {
    let ok: Vec<f64> = rows.iter().filter(|r| r.failure.is_none()).map(|r| r.forcing_error).collect();
    let m = ok.len() as f64;
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / m };
    let se = if ok.len() > 1 { (ok.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt() } else { 0.0 };
    let refresh = rows.iter().map(|r| r.refresh_seconds_mean).sum::<f64>() / rows.len().max(1) as f64;
    NonlinearSummary {
        method: method.to_string(),
        n_particles: n,
        mean_error: mean,
        std_error: se,
        refresh_seconds_mean: refresh,
        failures: rows.len() - ok.len(),
    }
}

/// Forcing recovery for the nonlinear problem with each Gaussian
/// approximation, then an FOT particle-count sweep.
pub fn cmd_nonlinear(cfg: &ExperimentConfig) -> Result<NonlinearResult> {
    let mut out = Outputs::new(cfg)?;
    let prob = build_nonlinear_problem(cfg)?;
    let f_true = true_forcing(cfg.problem);
    let mesh = prob.system.mesh().clone();

    let mut jobs: Vec<(ApproxMethod, usize, usize, bool)> = Vec::new();
    for &m in &cfg.nonlinear.methods {
        for rep in 0..cfg.replicates {
            jobs.push((m, cfg.ipla.n_particles, rep, true));
        }
    }
    for &n in &cfg.nonlinear.particle_sweep {
        for rep in 0..cfg.replicates {
            jobs.push((ApproxMethod::Fot, n, rep, false));
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(method, n, rep, _)| -> Result<(NonlinearRow, Option<Trace>)> {
            let run_cfg = IplaConfig {
                n_particles: n,
                seed: derive_seed(cfg.ipla.seed, 3, rep as u64),
                check_step_size: false,
                ..cfg.ipla.clone()
            };
            let start = Instant::now();
            let run = nonlinear_ipla_run(&prob.system, &prob.y, method, &run_cfg);
            let wall = start.elapsed().as_secs_f64();
            let (row, trace) = match run {
                Ok(run) => {
                    let failure = run.trace.failure.as_ref().map(|(k, m)| format!("iteration {k}: {m}"));
                    let failure = failure.or(run.trace.diverged_at.map(|k| format!("diverged at iteration {k}")));
                    let error = if failure.is_none() {
                        let c = forcing_coefficients(&mesh, &prob.mass, &run.trace.final_state.param)?;
                        l2_error_to_function(&mesh, &c, &f_true)?
                    } else {
                        f64::NAN
                    };
                    let row = NonlinearRow {
                        method: method.name().into(),
                        n_particles: n,
                        replicate: rep,
                        forcing_error: error,
                        wall_clock_seconds: wall,
                        refreshes: run.stats.refreshes,
                        refresh_seconds_mean: run.stats.refresh_seconds_mean,
                        newton_iterations_total: run.stats.newton_iterations_total,
                        failure,
                    };
                    (row, Some(run.trace))
                }
                Err(e) => (
                    NonlinearRow {
                        method: method.name().into(),
                        n_particles: n,
                        replicate: rep,
                        forcing_error: f64::NAN,
                        wall_clock_seconds: wall,
                        refreshes: 0,
                        refresh_seconds_mean: f64::NAN,
                        newton_iterations_total: 0,
                        failure: Some(e.to_string()),
                    },
                    None,
                ),
            };
            info!("{} N={n} rep={rep}: error {:.4} in {wall:.1}s", row.method, row.forcing_error);
            Ok((row, trace))
        })
        .collect::<Result<Vec<_>>>()?;

    let split = cfg.nonlinear.methods.len() * cfg.replicates;
    let rows: Vec<NonlinearRow> = results.iter().map(|r| r.0.clone()).collect();
    let (method_rows, sweep_rows) = rows.split_at(split);
    let methods: Vec<NonlinearSummary> = cfg
        .nonlinear
        .methods
        .iter()
        .map(|m| {
            let rs: Vec<&NonlinearRow> = method_rows.iter().filter(|r| r.method == m.name()).collect();
            summarise(m.name(), cfg.ipla.n_particles, &rs)
        })
        .collect();
    let sweep: Vec<NonlinearSummary> = cfg
        .nonlinear
        .particle_sweep
        .iter()
        .map(|&n| {
            let rs: Vec<&NonlinearRow> = sweep_rows.iter().filter(|r| r.n_particles == n).collect();
            summarise("fot", n, &rs)
        })
        .collect();

    let row_table = |rs: &[NonlinearRow]| -> Vec<Vec<String>> {
        rs.iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.n_particles.to_string(),
                    r.replicate.to_string(),
                    fmt(r.forcing_error),
                    fmt(r.wall_clock_seconds),
                    r.refreshes.to_string(),
                    fmt(r.refresh_seconds_mean),
                    r.newton_iterations_total.to_string(),
                    r.failure.clone().unwrap_or_default(),
                ]
            })
            .collect()
    };
    let header = [
        "method",
        "n_particles",
        "replicate",
        "forcing_l2_error",
        "wall_clock_seconds",
        "refreshes",
        "refresh_seconds_mean",
        "newton_iterations_total",
        "failure",
    ];
    out.csv("nonlinear_methods.csv", &header, &row_table(method_rows))?;
    out.csv("nonlinear_sweep.csv", &header, &row_table(sweep_rows))?;
    let summary_table: Vec<Vec<String>> = methods
        .iter()
        .chain(&sweep)
        .map(|s| {
            vec![
                s.method.clone(),
                s.n_particles.to_string(),
                fmt(s.mean_error),
                fmt(s.std_error),
                fmt(s.refresh_seconds_mean),
                s.failures.to_string(),
            ]
        })
        .collect();
    out.csv(
        "nonlinear_summary.csv",
        &["method", "n_particles", "mean_forcing_l2_error", "std_error", "refresh_seconds_mean", "failures"],
        &summary_table,
    )?;

    // final forcing estimate and trace of the first replicate of each method
    let mut estimates: Vec<(String, DVector<f64>)> = Vec::new();
    for (row, trace) in results.iter().take(split) {
        if row.replicate == 0 {
            if let Some(t) = trace {
                out.trace(&format!("nonlinear_trace_{}.csv", row.method), t)?;
                estimates.push((row.method.clone(), forcing_coefficients(&mesh, &prob.mass, &t.final_state.param)?));
            }
        }
    }
    let mut header: Vec<String> = ["node", "x", "f_true", "u_true"].map(String::from).to_vec();
    header.extend(estimates.iter().map(|(m, _)| format!("f_{m}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let est_rows: Vec<Vec<String>> = (0..mesh.node_count())
        .map(|i| {
            let x = mesh.nodes()[i];
            let mut row = vec![i.to_string(), fmt(x[0]), fmt(f_true(&x)), fmt(prob.u_true[i])];
            row.extend(estimates.iter().map(|(_, c)| fmt(c[i])));
            row
        })
        .collect();
    out.csv("nonlinear_forcing.csv", &header_ref, &est_rows)?;
    let result = NonlinearResult { methods, sweep, rows };
    out.finish(
        "nonlinear",
        cfg,
        json!({ "methods": result.methods, "sweep": result.sweep, "true_load_norm": prob.b_true.norm() }),
    )?;
    Ok(result)
}

/// Deterministic forward solve of the configured problem at the true forcing
/// (and `θ_true` for linear problems). Returns the nodal solution.
pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<DVector<f64>> {
    let mut out = Outputs::new(cfg)?;
    let (mesh, u) = if cfg.problem == ProblemId::Nonlinear1d {
        let prob = build_nonlinear_problem(cfg)?;
        let n = prob.system.n_u();
        let sol = prob.system.newton_solve(&prob.b_true, &DVector::zeros(n))?;
        (prob.system.mesh().clone(), sol.u)
    } else {
        let (model, b) = build_linear_model(cfg)?;
        let u = model
            .a_theta_at(cfg.theta_true)
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::numerical("stiffness matrix is singular"))?;
        (model.system.mesh.clone(), u)
    };
    let rows: Vec<Vec<String>> = (0..mesh.node_count())
        .map(|i| {
            let x = mesh.nodes()[i];
            vec![i.to_string(), fmt(x[0]), fmt(x[1]), mesh.is_boundary(i).to_string(), fmt(u[i])]
        })
        .collect();
    out.csv("solve.csv", &["node", "x", "y", "boundary", "u"], &rows)?;
    out.finish("solve", cfg, json!({ "n_u": mesh.node_count(), "max_abs_u": u.amax() }))?;
    Ok(u)
}

/// Exports the Laplacian eigenpairs used by the Hilbert GP approximation.
pub fn cmd_eigs(cfg: &ExperimentConfig) -> Result<crate::gp::LaplacianEigs> {
    let mut out = Outputs::new(cfg)?;
    let mesh = build_mesh(cfg)?;
    let dim = mesh.dim();
    let system = FemSystem::homogeneous(mesh, |_| 0.0, &[])?;
    let n_free = system.mesh.free_nodes().len();
    let rank = cfg.rank.unwrap_or_else(|| default_rank(n_free, dim)).min(n_free);
    let eigs = solve_laplacian_eigs(&system, rank)?;
    let path = out.dir.join("eigs.csv");
    eigs.write_csv(BufWriter::new(File::create(&path)?))?;
    out.files.push(path);
    out.finish("eigs", cfg, json!({ "rank": eigs.rank(), "eigenvalues": eigs.eigenvalues.as_slice() }))?;
    Ok(eigs)
}

/// Subcommand names accepted by [`run_command`].
pub const COMMANDS: [&str; 8] =
    ["convergence", "posterior-variance", "stability", "condition", "diffusivity", "nonlinear", "solve", "eigs"];

/// Problem used by a subcommand when the configuration names none.
pub fn default_problem(command: &str) -> ProblemId {
    match command {
        "diffusivity" => ProblemId::Diffusivity1d,
        "nonlinear" => ProblemId::Nonlinear1d,
        _ => ProblemId::Poisson1d,
    }
}

/// Runs the named subcommand; returns the metadata JSON path.
pub fn run_command(name: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match name {
        "convergence" => {
            cmd_convergence_order(cfg)?;
        }
        "posterior-variance" => {
            cmd_posterior_variance(cfg)?;
        }
        "stability" => {
            cmd_stability(cfg)?;
        }
        "condition" => {
            cmd_condition_numbers(cfg)?;
        }
        "diffusivity" => {
            cmd_diffusivity(cfg)?;
        }
        "nonlinear" => {
            cmd_nonlinear(cfg)?;
        }
        "solve" => {
            cmd_solve(cfg)?;
        }
        "eigs" => {
            cmd_eigs(cfg)?;
        }
        other => return Err(Error::invalid(format!("unknown command '{other}'"))),
    }
    Ok(metadata_path(&cfg.output_dir, name))
}

pub fn metadata_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.json"))
}

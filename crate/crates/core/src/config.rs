//! Experiment configuration: per-problem defaults, JSON files and dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linear::ThetaPrior;
use crate::nonlinear::{ApproxMethod, UtParams};
use crate::samplers::IplaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemId {
    /// `−u'' = 5 sin 6πx` on the unit interval.
    #[serde(rename = "poisson-1d")]
    Poisson1d,
    /// Two Gaussian bumps on the unit disc.
    #[serde(rename = "poisson-disc")]
    PoissonDisc,
    /// `−(e^θ u')' = 20 sin 4πx` with unknown θ.
    #[serde(rename = "diffusivity-1d")]
    Diffusivity1d,
    /// `−((1 + u²)u')' = 10 sin 2πx`, `u(0) = 0`, `u(1) = 1`.
    #[serde(rename = "nonlinear-1d")]
    Nonlinear1d,
}

impl ProblemId {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Parse { what: "problem id".into(), msg: format!("unknown problem '{s}'") })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Poisson1d => "poisson-1d",
            Self::PoissonDisc => "poisson-disc",
            Self::Diffusivity1d => "diffusivity-1d",
            Self::Nonlinear1d => "nonlinear-1d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::PoissonDisc => 2,
            _ => 1,
        }
    }
}

/// Squared-exponential kernel hyperparameters `σ²`, `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub amplitude: f64,
    pub length_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySettings {
    pub n_nodes: Vec<usize>,
    pub length_scales: Vec<f64>,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub n_particles: usize,
    pub n_iters: usize,
    /// Also search the preconditioned sampler at the same grid points.
    pub preconditioned_rerun: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSettings {
    pub methods: Vec<ApproxMethod>,
    /// Particle counts of the FOT sweep.
    pub particle_sweep: Vec<usize>,
    pub mc_samples: usize,
    pub ut: UtParams,
    pub left_value: f64,
    pub right_value: f64,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemId,
    /// Node count of interval meshes.
    pub n_nodes: usize,
    /// Ring count of disc meshes.
    pub n_rings: usize,
    /// Optional mesh file replacing the generated mesh.
    pub mesh_file: Option<PathBuf>,
    pub misfit_kernel: KernelParams,
    pub forcing_kernel: KernelParams,
    /// Number of Laplacian eigenpairs; `None` uses the default rank.
    pub rank: Option<usize>,
    /// Relative diagonal jitter of the covariance matrices (times `σ²`).
    pub jitter: f64,
    pub n_y: usize,
    pub sigma_y: f64,
    pub theta_prior: ThetaPrior,
    pub theta_true: f64,
    pub ipla: IplaConfig,
    pub replicates: usize,
    /// Seed of the synthetic data; sampler seeds are derived from `ipla.seed`.
    pub data_seed: u64,
    pub output_dir: PathBuf,
    pub particle_ladder: Vec<usize>,
    pub variance_particles: Vec<usize>,
    pub condition_nodes: Vec<usize>,
    pub warm_starts: Vec<usize>,
    pub stability: StabilitySettings,
    pub nonlinear: NonlinearSettings,
}

impl ExperimentConfig {
    pub fn defaults(problem: ProblemId) -> Self {
        let ipla = IplaConfig {
            step_size: 0.1,
            n_particles: 16,
            n_iters: 5_000,
            seed: 1,
            plateau_window: Some(1_000),
            ..IplaConfig::default()
        };
        let mut cfg = Self {
            problem,
            n_nodes: 64,
            n_rings: 8,
            mesh_file: None,
            misfit_kernel: KernelParams { amplitude: 1.0, length_scale: 0.1 },
            forcing_kernel: KernelParams { amplitude: 4.0, length_scale: 0.1 },
            rank: None,
            jitter: 1e-8,
            n_y: 16,
            sigma_y: 1e-2,
            theta_prior: ThetaPrior { mean: 0.0, var: 1.0 },
            theta_true: 0.0,
            ipla,
            replicates: 10,
            data_seed: 2024,
            output_dir: PathBuf::from("out"),
            particle_ladder: vec![8, 16, 32, 64, 128, 256],
            variance_particles: vec![16, 64, 256],
            condition_nodes: vec![32, 64, 128, 256, 512],
            warm_starts: vec![0, 10, 100, 1_000, 10_000],
            stability: StabilitySettings {
                n_nodes: vec![5, 10, 20, 30, 50],
                length_scales: vec![0.01, 0.1],
                gamma_lo: 1e-6,
                gamma_hi: 1e-3,
                n_particles: 8,
                n_iters: 500,
                preconditioned_rerun: true,
            },
            nonlinear: NonlinearSettings {
                methods: vec![ApproxMethod::Fot, ApproxMethod::Ut, ApproxMethod::Mc],
                particle_sweep: vec![1, 4, 16, 64],
                mc_samples: 200,
                ut: UtParams::default(),
                left_value: 0.0,
                right_value: 1.0,
            },
        };
        match problem {
            ProblemId::Poisson1d => {}
            ProblemId::PoissonDisc => {
                cfg.n_y = 32;
                cfg.forcing_kernel = KernelParams { amplitude: 100.0, length_scale: 0.2 };
            }
            ProblemId::Diffusivity1d => {
                cfg.n_nodes = 33;
                cfg.misfit_kernel = KernelParams { amplitude: 3.0, length_scale: 0.02 };
                cfg.theta_prior = ThetaPrior { mean: 1.5, var: 0.75 * 0.75 };
                cfg.ipla = IplaConfig {
                    step_size: 1e-3,
                    n_particles: 16,
                    n_iters: 10_000,
                    seed: 1,
                    ..IplaConfig::default()
                };
                cfg.replicates = 1;
            }
            ProblemId::Nonlinear1d => {
                cfg.n_nodes = 33;
                cfg.misfit_kernel = KernelParams { amplitude: 1.0, length_scale: 0.02 };
                cfg.forcing_kernel = KernelParams { amplitude: 6.0, length_scale: 0.1 };
                cfg.ipla = IplaConfig {
                    step_size: 5e-3,
                    n_particles: 4,
                    n_iters: 10_000,
                    seed: 1,
                    check_step_size: false,
                    ..IplaConfig::default()
                };
                cfg.replicates = 3;
            }
        }
        cfg
    }

    /// Defaults for the problem named in `file` (or in `overrides`), then the
    /// file contents, then the overrides.
    pub fn resolve(file: Option<&Value>, overrides: &[(String, String)]) -> Result<Self> {
        Self::resolve_with(file, overrides, ProblemId::Poisson1d)
    }

    /// As [`Self::resolve`], with `fallback` used when no problem is named.
    pub fn resolve_with(file: Option<&Value>, overrides: &[(String, String)], fallback: ProblemId) -> Result<Self> {
        let mut problem = file.and_then(|v| v.get("problem")).and_then(Value::as_str).map(str::to_string);
        for (k, v) in overrides {
            if k == "problem" {
                problem = Some(v.clone());
            }
        }
        let problem = match problem {
            Some(p) => ProblemId::parse(&p)?,
            None => fallback,
        };
        let mut value = serde_json::to_value(Self::defaults(problem))?;
        if let Some(f) = file {
            if !f.is_object() {
                return Err(config_error("configuration file must hold a JSON object"));
            }
            merge(&mut value, f);
        }
        for (k, v) in overrides {
            set_path(&mut value, k, parse_scalar(v))?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::load_with(Some(path), overrides, ProblemId::Poisson1d)
    }

    /// Reads the optional file and resolves it with `fallback` as the problem
    /// when neither the file nor the overrides name one.
    pub fn load_with(path: Option<&Path>, overrides: &[(String, String)], fallback: ProblemId) -> Result<Self> {
        let value = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
                Some(serde_json::from_str::<Value>(&text).map_err(|e| config_error(e.to_string()))?)
            }
            None => None,
        };
        Self::resolve_with(value.as_ref(), overrides, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("misfit_kernel.amplitude", self.misfit_kernel.amplitude),
            ("misfit_kernel.length_scale", self.misfit_kernel.length_scale),
            ("forcing_kernel.amplitude", self.forcing_kernel.amplitude),
            ("forcing_kernel.length_scale", self.forcing_kernel.length_scale),
            ("sigma_y", self.sigma_y),
            ("theta_prior.var", self.theta_prior.var),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(config_error("jitter must be non-negative"));
        }
        if self.n_nodes < 3 || self.n_rings < 1 || self.n_y < 1 || self.replicates < 1 {
            return Err(config_error("n_nodes ≥ 3, n_rings ≥ 1, n_y ≥ 1 and replicates ≥ 1 are required"));
        }
        if self.particle_ladder.iter().chain(&self.variance_particles).chain(&self.nonlinear.particle_sweep).any(|&n| n == 0) {
            return Err(config_error("particle counts must be positive"));
        }
        if self.condition_nodes.iter().chain(&self.stability.n_nodes).any(|&n| n < 3) {
            return Err(config_error("mesh sizes must be at least 3 nodes"));
        }
        if self.stability.length_scales.iter().any(|&l| !(l > 0.0)) {
            return Err(config_error("stability length scales must be positive"));
        }
        if !(self.stability.gamma_lo > 0.0 && self.stability.gamma_hi > self.stability.gamma_lo) {
            return Err(config_error("stability bracket must satisfy 0 < gamma_lo < gamma_hi"));
        }
        if self.nonlinear.mc_samples < 2 {
            return Err(config_error("nonlinear.mc_samples must be at least 2"));
        }
        self.ipla.validate().map_err(|e| config_error(e.to_string()))
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Parse { what: "configuration".into(), msg: msg.into() }
}

/// Splits `key=value` into its parts; a leading `--` is dropped.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let arg = arg.strip_prefix("--").unwrap_or(arg);
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(config_error(format!("override '{arg}' is not of the form key=value"))),
    }
}

/// JSON literal when the text parses as one, otherwise a string.
fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_error(format!("empty segment in key '{path}'")));
        }
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_error(format!("'{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Object(Map::new()));
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use statfem_core::config::{parse_override, ExperimentConfig};
use statfem_core::experiments::{default_problem, run_command};

/// statFEM forcing, diffusivity and nonlinear experiments with interacting
/// particle Langevin samplers.
#[derive(Parser)]
#[command(name = "statfem-ipla", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence order of the forcing estimate in the particle count.
    Convergence(RunArgs),
    /// Particle variance against the exact posterior variance.
    PosteriorVariance(RunArgs),
    /// Largest stable step size over mesh sizes and length scales.
    Stability(RunArgs),
    /// Condition numbers with and without preconditioning.
    Condition(RunArgs),
    /// Diffusivity estimation for several warm-start lengths.
    Diffusivity(RunArgs),
    /// Nonlinear forcing estimation with FOT, UT and MC approximations.
    Nonlinear(RunArgs),
    /// Single deterministic forward solve.
    Solve(RunArgs),
    /// Export Laplacian eigenpairs.
    Eigs(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `--ipla.step_size=0.05`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl Command {
    fn split(self) -> (&'static str, RunArgs) {
        match self {
            Self::Convergence(a) => ("convergence", a),
            Self::PosteriorVariance(a) => ("posterior-variance", a),
            Self::Stability(a) => ("stability", a),
            Self::Condition(a) => ("condition", a),
            Self::Diffusivity(a) => ("diffusivity", a),
            Self::Nonlinear(a) => ("nonlinear", a),
            Self::Solve(a) => ("solve", a),
            Self::Eigs(a) => ("eigs", a),
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let (name, args) = cli.command.split();
    let mut overrides = Vec::with_capacity(args.overrides.len());
    for raw in &args.overrides {
        match parse_override(raw) {
            Ok(kv) => overrides.push(kv),
            Err(e) => {
                error!("{e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let config = match ExperimentConfig::load_with(args.config.as_deref(), &overrides, default_problem(name)) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run_command(name, &config) {
        Ok(meta) => {
            println!("{}", meta.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{name} failed: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_CONFIG } else { EXIT_NUMERICAL })
        }
    }
}

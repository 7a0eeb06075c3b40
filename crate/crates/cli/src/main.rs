use clap::{Parser, Subcommand};
use sphs_cli::commands::{self, CliError, Command};
use sphs_cli::config::{emit_config, parse_config, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Stochastic port-Hamiltonian systems: simulation, energy audits and Dirac structures.
#[derive(Parser, Debug)]
#[command(name = "sphs", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `outputs.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of ensemble paths, overriding `ensemble.n_paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Step size, overriding `integrator.dt`.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Do not print the JSON summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate one path and write its trajectory CSV.
    Simulate,
    /// Ensemble mean path with standard errors, against the mean ODE when linear.
    Mean,
    /// Energy balance of one path.
    EnergyAudit,
    /// Strong (every path) or weak (ensemble mean) passivity.
    Passivity,
    /// Dynkin residual of an observable.
    Dynkin,
    /// Dirac structure algebra.
    Dirac {
        #[command(subcommand)]
        op: DiracOp,
    },
    /// Feedback interconnection of two systems.
    Interconnect,
    /// Print the model catalog.
    ListModels,
    /// Print the resolved configuration.
    EmitConfig,
}

#[derive(Subcommand, Debug)]
enum DiracOp {
    /// Verify the structure in `[dirac.structure]`.
    Check,
    /// Compose `[dirac.structure]` with `[dirac.other]` over the shared port.
    Compose,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| sphs_cli::config::ConfigError::block("cli", "--config is required"))?;
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.outputs.dir = o.to_string_lossy().into_owned();
    }
    if let Some(p) = cli.paths {
        cfg.ensemble.n_paths = p;
    }
    if let Some(dt) = cli.dt {
        cfg.integrator.dt = dt;
    }
    Ok(cfg.resolved()?)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cmd = match &cli.command {
        Cmd::ListModels => {
            print!("{}", commands::to_json_text(&commands::list_models()));
            return Ok(true);
        }
        Cmd::EmitConfig => {
            print!("{}", emit_config(&load(cli)?)?);
            return Ok(true);
        }
        Cmd::Simulate => Command::Simulate,
        Cmd::Mean => Command::Mean,
        Cmd::EnergyAudit => Command::EnergyAudit,
        Cmd::Passivity => Command::Passivity,
        Cmd::Dynkin => Command::Dynkin,
        Cmd::Dirac { op: DiracOp::Check } => Command::DiracCheck,
        Cmd::Dirac { op: DiracOp::Compose } => Command::DiracCompose,
        Cmd::Interconnect => Command::Interconnect,
    };
    let cfg = load(cli)?;
    let out = commands::run_subcommand(cmd, &cfg)?;
    if !cli.quiet {
        print!("{}", commands::to_json_text(&out.summary));
    }
    Ok(out.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

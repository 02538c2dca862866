use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::warn;
use serde::Serialize;

use plapx::experiments::{self, ExperimentConfig, Run};
use plapx::geometry::{triangulate_convex, write_mesh};

#[derive(Parser)]
#[command(name = "plapx", version, about = "Regularized p(x)-Laplacian solver and H2 regularity diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Write the base mesh of the run to this file.
    #[arg(long, global = true)]
    mesh_out: Option<PathBuf>,

    /// CSV destination; overrides `output.path`. The JSON sidecar goes next to it.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Exit with status 2 when the run reports warnings.
    #[arg(long, global = true)]
    warnings_as_errors: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Continuation in eps with pointwise diagnostics at the final level.
    Solve { config: PathBuf },
    /// One row per eps; a failing level is recorded and ends the sweep.
    SweepEps { config: PathBuf },
    /// Constant exponents p = p1 over `sweep.p1`, with the scaling fit.
    SweepP1 { config: PathBuf },
    /// Rounded domains over `sweep.radii`.
    SweepDomain { config: PathBuf },
    /// Manufactured-solution study over uniform refinements.
    Convergence { config: PathBuf },
    /// Boundary identity for the Hessian determinant on a disk.
    CheckIdentity { config: PathBuf },
    /// Data hypotheses and exponent regularity, without solving.
    Validate { config: PathBuf },
}

impl Command {
    fn config(&self) -> &Path {
        match self {
            Command::Solve { config }
            | Command::SweepEps { config }
            | Command::SweepP1 { config }
            | Command::SweepDomain { config }
            | Command::Convergence { config }
            | Command::CheckIdentity { config }
            | Command::Validate { config } => config,
        }
    }
}

fn emit<R: Serialize>(cli: &Cli, cfg: &ExperimentConfig, run: &Run<R>) -> Result<usize> {
    let path = cli
        .output
        .clone()
        .or_else(|| cfg.output_path.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", run.command)));
    let side = run.write(cfg, &path).with_context(|| format!("writing {}", path.display()))?;
    if let (Some(out), Some(mesh)) = (&cli.mesh_out, &run.mesh) {
        std::fs::write(out, write_mesh(mesh)).with_context(|| format!("writing {}", out.display()))?;
    }
    for w in &run.warnings {
        warn!("{}", w);
    }
    println!("{} rows -> {} ({})", run.rows.len(), path.display(), side.display());
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(run.warnings.len())
}

fn run(cli: &Cli) -> Result<usize> {
    let path = cli.command.config();
    let cfg = ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    let warnings = match &cli.command {
        Command::Solve { .. } => emit(cli, &cfg, &experiments::run_solve(&cfg)?)?,
        Command::SweepEps { .. } => emit(cli, &cfg, &experiments::run_eps_sweep(&cfg)?)?,
        Command::SweepP1 { .. } => emit(cli, &cfg, &experiments::run_p1_sweep(&cfg)?.0)?,
        Command::SweepDomain { .. } => emit(cli, &cfg, &experiments::run_domain_sweep(&cfg)?)?,
        Command::Convergence { .. } => emit(cli, &cfg, &experiments::run_convergence(&cfg)?)?,
        Command::CheckIdentity { .. } => emit(cli, &cfg, &experiments::run_identity_check(&cfg)?)?,
        Command::Validate { .. } => emit(cli, &cfg, &experiments::run_validate(&cfg)?)?,
    };
    if cli.mesh_out.is_some() && matches!(cli.command, Command::SweepDomain { .. } | Command::CheckIdentity { .. } | Command::Validate { .. }) {
        let out = cli.mesh_out.as_ref().expect("checked");
        let mesh = triangulate_convex(cfg.domain()?, cfg.mesh_h)?;
        std::fs::write(out, write_mesh(&mesh)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(warnings)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(n) if n > 0 && cli.warnings_as_errors => {
            eprintln!("error: {} warning(s) with --warnings-as-errors", n);
            ExitCode::from(2)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}

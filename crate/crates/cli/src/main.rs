use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zrp_cli::commands::{self, Context};
use zrp_cli::config::{ExperimentConfig, RawConfig, ENV_OUTPUT_DIR};
use zrp_cli::output::{Cell, RunDir};
use zrp_cli::CliError;

#[derive(Parser)]
#[command(name = "zrp", version, about = "Multi-species zero-range fluctuation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file, `key = value` lines or JSON.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set sim.N=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; takes precedence over the environment.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Kinetic Monte Carlo replicas with raw field records.
    Simulate(Common),
    /// Simulation plus field estimators and the quadratic functional.
    Fields(Common),
    /// Grand-canonical marginal and moments.
    Ensemble {
        #[command(subcommand)]
        action: EnsembleAction,
    },
    /// Frame condition solver.
    Frame {
        #[command(subcommand)]
        action: FrameAction,
    },
    /// Coupling tensor at the configured density.
    Coupling {
        #[command(subcommand)]
        action: CouplingAction,
    },
    /// Rotation scan for two species.
    Decouple {
        #[command(subcommand)]
        action: DecoupleAction,
    },
    /// Spectral reference integrators.
    Spde {
        #[command(subcommand)]
        action: SpdeAction,
    },
    /// Equivalence-of-ensembles and replacement diagnostics.
    Diagnose {
        #[command(subcommand)]
        action: DiagnoseAction,
    },
    /// Compare the estimators of two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline driven by the `analysis.*` toggles.
    Run(Common),
}

#[derive(Subcommand)]
enum EnsembleAction {
    Dump(Common),
}
#[derive(Subcommand)]
enum FrameAction {
    Solve(Common),
}
#[derive(Subcommand)]
enum CouplingAction {
    Build(Common),
}
#[derive(Subcommand)]
enum DecoupleAction {
    Scan(Common),
}
#[derive(Subcommand)]
enum SpdeAction {
    Run(Common),
}
#[derive(Subcommand)]
enum DiagnoseAction {
    Eoe(Common),
    Bg(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for s in &common.set {
        raw.set(s)?;
    }
    let mut cfg = ExperimentConfig::resolve(&raw)?;
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn with_context(
    common: &Common,
    name: &str,
    f: impl FnOnce(&ExperimentConfig, &Context, &mut RunDir) -> Result<(), CliError>,
) -> Result<PathBuf, CliError> {
    let cfg = load(common)?;
    let ctx = commands::context(&cfg)?;
    let mut out = RunDir::create(&cfg, name)?;
    f(&cfg, &ctx, &mut out)?;
    out.finish()
}

fn compare(a: &PathBuf, b: &PathBuf, common: &Common) -> Result<PathBuf, CliError> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for s in &common.set {
        raw.set(s)?;
    }
    if !raw.values.contains_key("density.a") && !raw.values.contains_key("density.phi") {
        raw.set("density.phi = 1")?;
        raw.set("family.n = 1")?;
    }
    let mut cfg = ExperimentConfig::resolve(&raw)?;
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    } else if std::env::var(ENV_OUTPUT_DIR).is_err() && common.config.is_none() {
        cfg.output_dir = a.join("compare");
    }
    let rows = commands::compare(a, b, &cfg)?;
    let mut out = RunDir::create(&cfg, "compare")?;
    let cells: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                r.key.clone().into(),
                r.a.into(),
                r.se_a.into(),
                r.b.into(),
                r.se_b.into(),
                r.z.into(),
                r.pass.to_string().into(),
            ]
        })
        .collect();
    out.csv("compare.csv", &["key", "a", "se_a", "b", "se_b", "z", "pass"], &cells)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let dir = out.finish()?;
    println!("{} estimators compared, {failed} outside tolerance", rows.len());
    if failed > 0 {
        return Err(CliError::Acceptance(format!("{failed} of {} estimators outside tolerance", rows.len())));
    }
    Ok(dir)
}

fn dispatch(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Simulate(c) => with_context(&c, "simulate", |cfg, ctx, out| commands::simulate(cfg, ctx, out, false)),
        Command::Fields(c) => with_context(&c, "fields", |cfg, ctx, out| commands::simulate(cfg, ctx, out, true)),
        Command::Ensemble { action: EnsembleAction::Dump(c) } => with_context(&c, "ensemble dump", commands::ensemble_dump),
        Command::Frame { action: FrameAction::Solve(c) } => with_context(&c, "frame solve", commands::frame_solve),
        Command::Coupling { action: CouplingAction::Build(c) } => with_context(&c, "coupling build", commands::coupling_build),
        Command::Decouple { action: DecoupleAction::Scan(c) } => with_context(&c, "decouple scan", commands::decouple),
        Command::Spde { action: SpdeAction::Run(c) } => with_context(&c, "spde run", commands::spde_run),
        Command::Diagnose { action: DiagnoseAction::Eoe(c) } => with_context(&c, "diagnose eoe", commands::diagnose_eoe),
        Command::Diagnose { action: DiagnoseAction::Bg(c) } => with_context(&c, "diagnose bg", commands::diagnose_bg),
        Command::Compare { run_a, run_b, common } => compare(&run_a, &run_b, &common),
        Command::Run(c) => {
            let cfg = load(&c)?;
            let mut out = RunDir::create(&cfg, "run")?;
            commands::run_experiment(&cfg, &mut out)?;
            out.finish()
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(dir) => {
            println!("artifacts in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

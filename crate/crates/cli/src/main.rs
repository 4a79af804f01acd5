//! Command-line front end for the experiment drivers.
//!
//! Exit codes: 0 when every asserted row passes, 1 when at least one
//! asserted row fails, 2 on configuration or usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use blockbp_cli::config::{ExperimentConfig, ExperimentKind};
use blockbp_cli::experiments;

#[derive(Parser)]
#[command(name = "blockbp", version, about = "Experiment harness for community broadcast models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the spectral and noise conditions of a model.
    CheckModel(RunArgs),
    /// Compare sampled-tree level moments against their closed forms.
    TreeMoments(RunArgs),
    /// Sweep root-recovery estimators over conditioning depths.
    TreeRecon(RunArgs),
    /// Measure contraction of the noisy posterior toward the exact one.
    Contraction(RunArgs),
    /// Reconstruct graph communities with local amplification.
    SbmRecon(RunArgs),
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        match self {
            Command::CheckModel(a) => (ExperimentKind::CheckModel, a),
            Command::TreeMoments(a) => (ExperimentKind::TreeMoments, a),
            Command::TreeRecon(a) => (ExperimentKind::TreeRecon, a),
            Command::Contraction(a) => (ExperimentKind::Contraction, a),
            Command::SbmRecon(a) => (ExperimentKind::SbmRecon, a),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial-count override.
    #[arg(long)]
    trials: Option<u64>,
    /// Directory to write <experiment>.csv and <experiment>.json into,
    /// in addition to any paths named by the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ball-radius override (graph reconstruction only).
    #[arg(long)]
    radius: Option<usize>,
    /// Reuse one global partition for every vertex instead of repartitioning
    /// with the vertex's ball hidden (faster, approximate).
    #[arg(long)]
    approx_blackbox: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    match run(kind, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.experiment != kind {
        bail!(
            "config declares experiment '{}' but the subcommand is '{}'",
            cfg.experiment.tag(),
            kind.tag()
        );
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = Some(trials);
    }
    if let Some(radius) = args.radius {
        cfg.radius = Some(radius);
    }
    if args.approx_blackbox {
        cfg.approx_blackbox = true;
    }
    // Overrides can break what load() already validated.
    cfg.validate()?;
    let report = experiments::run(&cfg)?;
    print!("{}", report.to_csv());
    if let Some(output) = &cfg.output {
        if let Some(csv) = &output.csv {
            report.write_csv(csv)?;
        }
        if let Some(json) = &output.json {
            report.write_json(json)?;
        }
    }
    if let Some(dir) = &args.out {
        report.write_csv(&dir.join(format!("{}.csv", cfg.experiment.tag())))?;
        report.write_json(&dir.join(format!("{}.json", cfg.experiment.tag())))?;
    }
    for row in report.failed_rows() {
        eprintln!("FAILED row={} parameters={}", row.row, row.parameters);
    }
    Ok(report.all_pass())
}

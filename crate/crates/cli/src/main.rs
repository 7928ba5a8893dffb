//! `adhesion`: runs one experiment from a TOML config and writes its report,
//! CSV tables and snapshots to an output directory.

use std::path::PathBuf;

use adhesion_core::harness::{self, ExperimentConfig, Output};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adhesion", version, about = "Two-phenotype adhesion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Particle system from the initial density.
    Simulate(Common),
    /// Spectral mean-field solve.
    Pde(Common),
    /// One coupled particle/copy run with Lyapunov diagnostics.
    Couple(Common),
    /// Propagation-of-chaos scan over the particle-count ladder.
    PocScan(Common),
    /// Distance between two PDE solutions over time.
    Contract(Common),
    /// Bifurcation sweep: PDE onset against the Newton branch.
    Bifurcate(Common),
    /// Per-mode instability thresholds.
    Thresholds(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Override `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run even when the smallness bound fails.
    #[arg(long)]
    allow_exploratory: bool,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (runner, common): (fn(&ExperimentConfig) -> adhesion_core::Result<Output>, Common) = match cli.command {
        Command::Simulate(c) => (harness::run_simulate, c),
        Command::Pde(c) => (harness::run_pde, c),
        Command::Couple(c) => (harness::run_couple, c),
        Command::PocScan(c) => (harness::run_poc_scan, c),
        Command::Contract(c) => (harness::run_contraction, c),
        Command::Bifurcate(c) => (harness::run_bifurcation_sweep, c),
        Command::Thresholds(c) => (harness::run_thresholds, c),
    };
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    cfg.run.allow_exploratory |= common.allow_exploratory;

    let started = std::time::Instant::now();
    let output = runner(&cfg)?;
    output
        .write(&common.out)
        .with_context(|| format!("writing results to {}", common.out.display()))?;
    log::info!("finished in {:.1?}", started.elapsed());

    for (k, v) in &output.report.entries {
        println!("{k} = {v}");
    }
    for (name, _) in output.files() {
        println!("wrote {}", common.out.join(name).display());
    }
    Ok(())
}

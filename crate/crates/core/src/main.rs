use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use obstacle_lab::config::ExperimentConfig;
use obstacle_lab::run::{execute, Command};
use obstacle_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "obstacle-lab", version, about = "Double obstacle problems with measure data on uniform grids")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one instance and write the solution and energy trace.
    Solve(Common),
    /// Run the comparison chain at the configured centers and radii.
    Chain(Common),
    /// Structure checks, estimate report, level-set decay and approximation tables.
    Verify(Common),
    /// Estimate report across the configured resolutions.
    Sweep(Common),
    /// Built-in oracle checks.
    Selftest(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (cmd, common) = match cli.command {
        Cmd::Solve(c) => (Command::Solve, c),
        Cmd::Chain(c) => (Command::Chain, c),
        Cmd::Verify(c) => (Command::Verify, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Selftest(c) => (Command::Selftest, c),
    };
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .map_err(|e| LabError::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.unwrap_or_else(|| PathBuf::from(&cfg.output));
    let artifacts = execute(cmd, &cfg)?;
    artifacts.write(&out)?;
    for (name, _) in &artifacts.files {
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

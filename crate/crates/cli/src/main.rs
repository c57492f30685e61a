//! Command-line entry point for configuration-driven simulation runs.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numerical
//! failures during a run.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lma",
    about = "STEM image simulation: Multislice, PRISM and LMA",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = available parallelism); overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured solver and write images, counters and plans.
    Simulate,
    /// Relative errors between same-named images of two run directories.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Probe-approximation error table over ranges of f and L.
    ProbeApprox {
        /// Comma-separated subsampling factors; defaults to the configured f.
        #[arg(long)]
        f_list: Option<String>,
        /// Comma-separated neighbor counts; defaults to 1..=configured L.
        #[arg(long)]
        l_list: Option<String>,
    },
    /// Partition costs for all three strategies at one or more bounds.
    PartitionReport {
        /// Comma-separated memory bounds; defaults to the configured bound
        /// (or 2L without one).
        #[arg(long)]
        memory: Option<String>,
    },
    /// Apply the configured atom edit, recompute the flagged subset and
    /// verify against a full rerun.
    RecomputeDemo,
    /// Closed-form crossover factor between the propagation variants.
    Crossover {
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        #[arg(long)]
        k1: usize,
        #[arg(long)]
        k2: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Run(_)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Result<config::Prepared, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required for this command".into()))?;
    let prepared = config::load(path)?;
    let workers = cli.workers.unwrap_or(prepared.config.workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    }
    Ok(prepared)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate => {
            let prepared = load_config(cli)?;
            let out_dir = run::resolve_out_dir(&prepared, &cli.out);
            run::simulate(&prepared, &out_dir, cli.verbose)
        }
        Command::Compare { dir_a, dir_b } => run::compare(dir_a, dir_b),
        Command::ProbeApprox { f_list, l_list } => {
            let prepared = load_config(cli)?;
            let out_dir = run::resolve_out_dir(&prepared, &cli.out);
            let lma = prepared
                .config
                .solver
                .lma
                .as_ref()
                .ok_or_else(|| CliError::Config("probe-approx needs [solver.lma]".into()))?;
            let f_values = match f_list {
                Some(s) => run::parse_usize_list(s, "f_list")?,
                None => vec![lma.f],
            };
            let l_values = match l_list {
                Some(s) => run::parse_usize_list(s, "l_list")?,
                None => (1..=lma.l).collect(),
            };
            run::probe_approx(&prepared, &out_dir, &f_values, &l_values)
        }
        Command::PartitionReport { memory } => {
            let prepared = load_config(cli)?;
            let out_dir = run::resolve_out_dir(&prepared, &cli.out);
            let lma =
                prepared.config.solver.lma.as_ref().ok_or_else(|| {
                    CliError::Config("partition-report needs [solver.lma]".into())
                })?;
            let bounds = match memory {
                Some(s) => run::parse_usize_list(s, "memory")?,
                None => vec![lma.memory_bound.unwrap_or(2 * lma.l)],
            };
            run::partition_report(&prepared, &out_dir, &bounds)
        }
        Command::RecomputeDemo => {
            let prepared = load_config(cli)?;
            let out_dir = run::resolve_out_dir(&prepared, &cli.out);
            run::recompute_demo(&prepared, &out_dir)
        }
        Command::Crossover { x, y, k1, k2 } => run::crossover(*x, *y, *k1, *k2),
    }
}

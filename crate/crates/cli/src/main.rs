//! `spinbath`: drives QMC runs and scans, mean-field sweeps, exact
//! diagonalization and kernel dumps from a TOML experiment file.

mod commands;
mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use commands::RunContext;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "spinbath", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed, overriding `schedule.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Continue chains from existing checkpoints.
    #[arg(long, global = true)]
    resume: bool,

    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true, env = "SPINBATH_OUTPUT_DIR")]
    out: Option<PathBuf>,

    /// Dotted-key override such as `model.gamma=0.51`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// QMC at the configured point: observables table and P(m_Z).
    Run,
    /// QMC over the sweep grid, with a Binder crossing when J and L vary.
    Scan,
    /// Chain mean field over the sweep grid, one row per branch.
    Vmf,
    /// Exact diagonalization of the truncated model over the sweep grid.
    Oracle,
    /// Tabulate the bath kernels on the lattice's time grid.
    Kernel,
    /// Print the effective configuration and its hash.
    Config,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let started = Instant::now();
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("schedule.seed={seed}"));
    }
    let mut config = config::parse_config(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Command::Config = cli.command {
        print!("# config_hash={}\n{}", config.hash(), config.echo());
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    let ctx = RunContext {
        config,
        out,
        resume: cli.resume,
        jobs: rayon::current_num_threads(),
        started,
    };
    let files = match cli.command {
        Command::Run => commands::qmc_run(&ctx),
        Command::Scan => commands::qmc_scan(&ctx),
        Command::Vmf => commands::vmf_sweep(&ctx),
        Command::Oracle => commands::oracle_ed(&ctx),
        Command::Kernel => commands::kernel_dump(&ctx),
        Command::Config => unreachable!("handled above"),
    }?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

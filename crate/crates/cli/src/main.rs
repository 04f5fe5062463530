//! `gridesc`: case parsing, operating points, exit rates, pathology scans,
//! cascade simulation and severity statistics from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{read_config, Resolver};

#[derive(Debug, Parser)]
#[command(name = "gridesc", version, about = "Line failure rates and cascades of stochastic grid models")]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files (created if missing).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; defaults to GRIDESC_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file mirroring the long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a case and write it back as normalized JSON.
    Parse { case: PathBuf },
    /// Operating point, Hessian spectrum summary and line loadings.
    Equilibrium {
        case: PathBuf,
        #[arg(long)]
        limit_scale: Option<f64>,
    },
    /// Analytic exit rates per line and temperature.
    Rate {
        case: PathBuf,
        /// External line ids; all lines in service when omitted.
        #[arg(long, value_delimiter = ',')]
        line: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// Langevin replicas per row for a Monte Carlo comparison.
        #[arg(long)]
        simulate: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        max_time: Option<f64>,
        #[arg(long)]
        limit_scale: Option<f64>,
    },
    /// Nested, isolation and fluctuation-path diagnostics per line.
    Scan {
        case: PathBuf,
        #[arg(long, value_delimiter = ',')]
        line: Vec<usize>,
        #[arg(long)]
        limit_scale: Option<f64>,
        /// Random restarts in the isolation check.
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Kinetic Monte Carlo cascades and their severity exponent.
    Cascade {
        case: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        /// Horizon per run in seconds.
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        limit_scale: Option<f64>,
        /// Rate catalog to reuse if present and to save afterwards.
        #[arg(long)]
        catalog: Option<String>,
        #[command(flatten)]
        sepsi: SepsiFlags,
    },
    /// Group an outage log into cascades and fit the severity exponent.
    Analyze {
        input: PathBuf,
        #[command(flatten)]
        sepsi: SepsiFlags,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct SepsiFlags {
    #[arg(long)]
    pub cascade_bandwidth: Option<f64>,
    #[arg(long)]
    pub generation_bandwidth: Option<f64>,
    #[arg(long)]
    pub g_min: Option<usize>,
    #[arg(long)]
    pub g_max: Option<usize>,
    /// Fit an untruncated law with a tail bin above `g_max`.
    #[arg(long)]
    pub censored: bool,
}

fn init_threads(res: &mut Resolver, flag: Option<usize>) -> Result<()> {
    let env = std::env::var("GRIDESC_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let from_file = res.get_opt::<usize>("threads", flag)?;
    if let Some(n) = from_file.or(env) {
        res.used.insert("threads".into(), n.to_string());
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let start = Instant::now();
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => Default::default(),
    };
    let mut res = Resolver::new(file);
    init_threads(&mut res, cli.threads)?;
    let seed = res.get("seed", cli.seed, 0u64)?;
    let out_dir = match cli.out_dir {
        Some(p) => p,
        None => PathBuf::from(res.file_value("out_dir").unwrap_or(".")),
    };
    res.used.insert("out_dir".into(), out_dir.display().to_string());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let ctx = commands::Context { seed, out_dir };
    let outcome = commands::dispatch(cli.command, &ctx, &mut res)?;
    let mut m = outcome.manifest;
    m.wall_time_s = start.elapsed().as_secs_f64();
    let path = m.write(&ctx.out_dir)?;
    println!("manifest {} -> {}", m.id, path.display());
    for f in &m.failures {
        eprintln!("failed: {f}");
    }
    Ok(if outcome.failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

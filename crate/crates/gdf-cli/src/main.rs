//! `gdf`: simulate Gram-de Finetti arrays, extract their spectral feature
//! representation, and verify the simulator against its defining
//! invariants.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 configuration or
//! usage error, 3 I/O or file-format error, 4 an input failed positive
//! semidefiniteness, 5 diagonal splitting clipped too much spectral mass.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gramdf::{Error, Result};

#[derive(Parser)]
#[command(name = "gdf", version, about = "Gram-de Finetti array simulator and verifier")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the relative PSD tolerance.
    #[arg(long, global = true, value_name = "EPS")]
    tol: Option<f64>,

    /// Suppress progress output (reports are still written).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an n x n array from a model and store it with its latents.
    Simulate {
        /// Catalog name, model file, or inline model JSON.
        #[arg(long)]
        model: Option<String>,
        /// Number of rows to sample.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Eigendecompose the averaged kernel into eigenvalues and features.
    Decompose {
        /// Catalog name, model file, or inline model JSON.
        #[arg(long)]
        model: Option<String>,
        /// Read the kernel from a file instead of averaging a model.
        #[arg(long, value_name = "PATH")]
        kernel: Option<PathBuf>,
        /// Dyadic grid level (2^m cells per axis).
        #[arg(long)]
        m: Option<u32>,
    },
    /// Split a sampled array into feature vectors and diagonal excesses.
    Recover {
        /// Array file; defaults to array.gda in the output directory.
        #[arg(long, value_name = "PATH")]
        array: Option<PathBuf>,
        /// Fix the feature rank instead of selecting it spectrally.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Find the orthogonal map aligning one feature cloud onto another.
    Align {
        /// Cloud to be rotated.
        #[arg(long, value_name = "PATH")]
        cloud_a: PathBuf,
        /// Reference cloud.
        #[arg(long, value_name = "PATH")]
        cloud_b: PathBuf,
        /// Treat clouds as index-paired (closed-form solution).
        #[arg(long)]
        paired: bool,
    },
    /// Run invariant checks against stored artifacts and write a report.
    Verify {
        /// Comma-separated subset of checks to run.
        #[arg(long, value_name = "NAMES")]
        only: Option<String>,
    },
    /// Simulate, decompose, recover, align, and verify in one run.
    Pipeline {
        /// Catalog name, model file, or inline model JSON.
        #[arg(long)]
        model: Option<String>,
        /// Number of rows to sample.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("GDF_THREADS") {
        let threads: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| {
                Error::Config(format!("GDF_THREADS must be a positive integer, got {raw:?}"))
            })?;
        // Ignore failure: the pool may have been initialized already.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    let mut overrides = config::Overrides {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        tol: cli.tol,
        quiet: cli.quiet,
        ..Default::default()
    };
    match cli.command {
        Command::Simulate { model, n } => {
            overrides.model = model;
            overrides.n = n;
            let cfg = config::load(&overrides)?;
            commands::cmd_simulate(&cfg)
        }
        Command::Decompose { model, kernel, m } => {
            overrides.model = model;
            overrides.m = m;
            let cfg = config::load(&overrides)?;
            commands::cmd_decompose(&cfg, kernel.as_deref())
        }
        Command::Recover { array, rank } => {
            let cfg = config::load(&overrides)?;
            commands::cmd_recover(&cfg, array.as_deref(), rank)
        }
        Command::Align {
            cloud_a,
            cloud_b,
            paired,
        } => {
            let cfg = config::load(&overrides)?;
            commands::cmd_align(&cfg, &cloud_a, &cloud_b, paired)
        }
        Command::Verify { only } => {
            let cfg = config::load(&overrides)?;
            commands::cmd_verify(&cfg, only.as_deref())
        }
        Command::Pipeline { model, n } => {
            overrides.model = model;
            overrides.n = n;
            let cfg = config::load(&overrides)?;
            commands::cmd_pipeline(&cfg)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Data(_) => 3,
        Error::NotPsd { .. } => 4,
        Error::ModelMismatch { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

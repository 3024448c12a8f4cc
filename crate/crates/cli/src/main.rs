//! Command-line harness for spectral CT material decomposition
//! experiments: phantom generation, measurement simulation, denoiser
//! training, decomposition, evaluation, and image export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "sctk", version, about = "Spectral CT material decomposition toolkit")]
struct Cli {
    /// Experiment configuration file (flat `key: value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground-truth water/calcium phantoms.
    Phantom,
    /// Simulate spectral CT measurements from a phantom.
    Simulate,
    /// Train the convolutional denoiser on a phantom dataset.
    Train,
    /// Run a material decomposition algorithm (optionally as an ensemble).
    Decompose,
    /// Compute quality metrics, ensemble statistics, and the timing table.
    Evaluate,
    /// Export material images to 8-bit grayscale with window/level.
    Export,
}

fn load_config(cli: &Cli) -> Result<Config, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::empty(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out_dir", out.display().to_string());
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), MainError> {
    let mut cfg = load_config(cli)?;

    // Parse and validate everything up front; commands only see complete
    // argument sets, so failures cannot leave partial outputs behind.
    macro_rules! run_command {
        ($module:ident) => {{
            let args = commands::$module::parse(&mut cfg);
            match args {
                Some(args) if !cfg.has_errors() => {
                    cfg.finish()?;
                    commands::$module::run(&args).map_err(MainError::Runtime)
                }
                _ => {
                    // Consume nothing further; report collected errors.
                    Err(cfg.finish().expect_err("errors were recorded").into())
                }
            }
        }};
    }

    match cli.command {
        Command::Phantom => run_command!(phantom),
        Command::Simulate => run_command!(simulate),
        Command::Train => run_command!(train),
        Command::Decompose => run_command!(decompose),
        Command::Evaluate => run_command!(evaluate),
        Command::Export => run_command!(export),
    }
}

enum MainError {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for MainError {
    fn from(e: ConfigError) -> Self {
        MainError::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(MainError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(MainError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

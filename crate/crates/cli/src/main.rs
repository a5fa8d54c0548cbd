//! `dfno`: selftest, dataset generation, training, inference, and the
//! weak-scaling benchmark. The worker count comes from `--workers`, falling
//! back to the `DFNO_WORKERS` environment variable (default 1).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfno_core::bench::{run_bench, to_csv, BenchConfig};
use dfno_core::error::{Error, Result};
use dfno_core::heat::{gen_dataset, GenDataConfig};
use dfno_core::selftest::{run_selftest, SelftestOptions};
use dfno_core::train::{run_infer, run_training, InferConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "dfno", about = "Model-parallel Fourier neural operator toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file for the command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count (default: DFNO_WORKERS, then 1).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in verification suites.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Debug hook: corrupt a broadcast adjoint so a failure is reported.
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Generate the synthetic heat-equation dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run a trained model on an input tensor file.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Run the weak-scaling benchmark and emit a timing CSV.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn workers_from(common: &Common) -> Result<usize> {
    if let Some(w) = common.workers {
        return Ok(w);
    }
    match std::env::var("DFNO_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("DFNO_WORKERS must be an integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn load_config<T: serde::de::DeserializeOwned>(common: &Common) -> Result<T> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("this command requires --config <path>"))?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Selftest { corrupt_adjoint, .. } => {
            let reports = run_selftest(&SelftestOptions { corrupt_adjoint })?;
            let mut all_passed = true;
            for report in &reports {
                println!("{}", report.line());
                all_passed &= report.passed;
            }
            println!("{}", if all_passed { "selftest: all suites passed" } else { "selftest: FAILURES" });
            Ok(all_passed)
        }
        Command::GenData { common } => {
            let mut config: GenDataConfig = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let manifest = gen_dataset(&config)?;
            println!(
                "wrote {} samples (grid {}x{}, {} timesteps) to {}",
                manifest.n_samples, manifest.grid, manifest.grid, manifest.n_t, config.out_dir
            );
            Ok(true)
        }
        Command::Train { common } => {
            let mut config: TrainConfig = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let workers = workers_from(&common)?;
            let history = run_training(&config, workers)?;
            for row in &history {
                println!("epoch {}: train {} val {}", row.epoch, row.train, row.val);
            }
            println!("wrote {}/losses.csv and {}/checkpoint", config.out_dir, config.out_dir);
            Ok(true)
        }
        Command::Infer { common } => {
            let config: InferConfig = load_config(&common)?;
            let workers = workers_from(&common)?;
            let elapsed = run_infer(&config, workers)?;
            println!("wrote {}", config.output_path);
            println!("forward pass took {elapsed} s");
            Ok(true)
        }
        Command::Bench { common } => {
            let config: BenchConfig = match &common.config {
                Some(_) => load_config(&common)?,
                None => BenchConfig::default(),
            };
            let workers = workers_from(&common)?;
            let records = run_bench(&config, workers)?;
            let csv = to_csv(&records);
            match &config.out_csv {
                Some(path) => println!("wrote {path}"),
                None => print!("{csv}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use cerberus_cli::commands::{self, Outcome};
use clap::{Parser, Subcommand};

/// Multi-task histology segmentation and classification.
#[derive(Parser)]
#[command(name = "cerberus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Corpus specification (JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `all` or comma-separated `fold<k>`.
        #[arg(long, default_value = "all")]
        split: String,
        /// Report path; a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Config whose architecture the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tiled prediction on one image container.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 64)]
        tile: usize,
        #[arg(long, default_value_t = 16)]
        overlap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical task frequencies of the configured sampler.
    SamplerStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the model gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated extract-refine-retrain with a scripted annotator.
    RefineSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> cerberus::Result<Outcome> {
    match command {
        Command::GenData { spec, out, scenes, seed } => commands::gen_data(spec.as_deref(), &out, scenes, seed),
        Command::Train { config, out, resume } => commands::train_cmd(&config, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
            config,
        } => commands::eval_cmd(&checkpoint, &dataset, &split, &out, config.as_deref()),
        Command::Infer {
            checkpoint,
            image,
            tile,
            overlap,
            out,
        } => commands::infer_cmd(&checkpoint, &image, tile, overlap, &out),
        Command::SamplerStats {
            config,
            draws,
            tolerance,
            out,
        } => commands::sampler_stats_cmd(&config, draws, tolerance, out.as_deref()),
        Command::Gradcheck { config, out } => commands::gradcheck_cmd(&config, out.as_deref()),
        Command::RefineSim { config, rounds, k, out } => commands::refine_sim_cmd(&config, rounds, k, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) => {
            eprintln!("{}", outcome.summary);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 3 } else { 2 })
        }
    }
}

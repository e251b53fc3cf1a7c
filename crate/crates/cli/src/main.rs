mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Layout;
use config::RunConfig;

/// Synthetic-data diffusion editing with learned semantic embeddings.
#[derive(Parser)]
#[command(name = "semedit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the shapes dataset and its train/held-out split.
    GenData,
    /// Train the conditional noise predictor.
    TrainDenoiser,
    /// Train one classifier per configured attribute.
    TrainClassifier,
    /// Learn one embedding per class of each configured attribute.
    LearnEmbedding,
    /// Edit held-out images and write verdicts and image grids.
    Edit,
    /// Write collapse statistics and one-step error bounds.
    Diagnose,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let layout = Layout::new(&cfg.out);
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &layout),
        Command::TrainDenoiser => commands::train_denoiser_cmd(&cfg, &layout),
        Command::TrainClassifier => commands::train_classifier_cmd(&cfg, &layout),
        Command::LearnEmbedding => commands::learn_embedding(&cfg, &layout),
        Command::Edit => commands::edit(&cfg, &layout),
        Command::Diagnose => commands::diagnose(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] patchmix::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            CliError::Core(_) => 1,
        }
    }
}

/// Anatomy/characteristic mixing encoder: data, training and evaluation.
#[derive(Parser)]
#[command(name = "patchmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural corpus.
    GenData(commands::GenDataArgs),
    /// Train the encoder with the mixing objective.
    TrainEncoder(commands::TrainArgs),
    /// Reconstruction PSNR per split and domain.
    Eval(commands::EvalArgs),
    /// Dump a donor × source mixing grid.
    Mixgrid(commands::MixgridArgs),
    /// Train the downstream classifier with and without mix augmentation.
    TrainClassifier(commands::ClassifierArgs),
    /// Unlabeled-pool and deep-encoder trend experiments.
    ScaleExp(commands::ScaleArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainEncoder(a) => commands::train_encoder(a),
        Command::Eval(a) => commands::eval(a),
        Command::Mixgrid(a) => commands::mixgrid(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::ScaleExp(a) => commands::scale_exp(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `tabmlm`: prepare tables, train the encoder, impute missing cells,
//! evaluate ablations, and report compute and carbon cost.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success, every output written |
//! | 1 | unexpected internal error |
//! | 2 | usage or configuration error |
//! | 3 | input data error (unparseable, ragged, degenerate, ...) |
//! | 4 | file system error |
//! | 5 | checkpoint or vocabulary error (corrupt, mismatched) |
//! | 6 | training diverged (non-finite loss) |

mod config;
mod cost;
mod evaluate;
mod impute;
mod manifest;
mod prepare;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tabmlm::Error;

use crate::config::UsageError;

#[derive(Parser)]
#[command(name = "tabmlm", version, about = "Masked-language-model imputation for numeric tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a CSV, split it, and write the vocabulary.
    Prepare(prepare::Args),
    /// Train (or resume training) the encoder on a prepared directory.
    Train(train::Args),
    /// Fill missing cells of a CSV with a trained checkpoint.
    Impute(impute::Args),
    /// Per-column ablation over a run's checkpoints, with heatmaps.
    Evaluate(evaluate::Args),
    /// Parameter and multiply-accumulate counts for a model preset.
    Flops(cost::FlopsArgs),
    /// Emissions for a given energy use.
    Carbon(cost::CarbonArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

/// Shared `--config` flag.
#[derive(clap::Args, Debug)]
pub struct ConfigArg {
    /// key = value file; flags override it, it overrides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 4,
                Error::InvalidConfig(_)
                | Error::InvalidTrainConfig(_)
                | Error::InvalidSplit { .. }
                | Error::NegativeInput(_)
                | Error::SequenceTooLong { .. } => 2,
                Error::Checkpoint(_)
                | Error::ChecksumMismatch
                | Error::VocabMismatch { .. }
                | Error::InvalidVocab(_) => 5,
                Error::NonFiniteLoss { .. } => 6,
                Error::Csv(_)
                | Error::NonNumericCell { .. }
                | Error::RaggedRow { .. }
                | Error::EmptyTable(_)
                | Error::DegenerateColumn { .. }
                | Error::OutOfRange(_)
                | Error::NotQuantized(_)
                | Error::ColumnOutOfRange { .. }
                | Error::Grammar { .. }
                | Error::ColumnCountMismatch { .. }
                | Error::NothingToImpute(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => train::run(a),
        Command::Impute(a) => impute::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Flops(a) => cost::flops(a),
        Command::Carbon(a) => cost::carbon(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

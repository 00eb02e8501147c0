//! `tdid`: generate synthetic datasets, train the detector, evaluate,
//! run single detections with annotated dumps, sweep embedding ablations,
//! and self-check the numerics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tdid", version, about = "Target-driven instance detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset tree.
    GenData(tdid_cli::gen_data::Args),
    /// Train a model on a dataset and write a checkpoint directory.
    Train(tdid_cli::train_cmd::Args),
    /// Evaluate a checkpoint on a dataset split and report mAP.
    Eval(tdid_cli::eval_cmd::Args),
    /// Detect one cached target in one scene image.
    Detect(tdid_cli::detect_cmd::Args),
    /// Train every embedding-branch combination and print the mAP matrix.
    Ablate(tdid_cli::ablate::Args),
    /// Run gradient and oracle self-checks.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => tdid_cli::gen_data::run(args),
        Command::Train(args) => tdid_cli::train_cmd::run(args),
        Command::Eval(args) => tdid_cli::eval_cmd::run(args),
        Command::Detect(args) => tdid_cli::detect_cmd::run(args),
        Command::Ablate(args) => tdid_cli::ablate::run(args),
        Command::Selfcheck => tdid_cli::selfcheck::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

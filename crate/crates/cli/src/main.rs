//! `newscap`: train a BPE vocabulary, train and sample the captioner, score
//! predictions, and run the gradient-check suite.

mod commands;
mod config;
mod synthdata;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A user-facing input problem (bad config, mismatched files, malformed
/// data). Exits with status 1; everything else exits with 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "newscap", version, about = "Entity-aware news image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from a text corpus (one document per line).
    BpeTrain(commands::BpeTrainArgs),
    /// Train a captioning model on the train split.
    Train(commands::TrainArgs),
    /// Caption every example of a split with a trained checkpoint.
    Generate(commands::GenerateArgs),
    /// Score a predictions file against the dataset.
    Evaluate(commands::EvaluateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Write a small synthetic dataset, vocabulary and config.
    Synth(synthdata::SynthArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BpeTrain(a) => commands::bpe_train(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => synthdata::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

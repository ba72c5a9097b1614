//! `lorafuse`: train LoRA adapters on a frozen backbone, merge them and
//! benchmark the merged multi-task model.

mod commands;
mod config;
mod exit;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{artifacts, evaluate, matrix, merge, synth, train};

/// Config-file tables that belong to a subcommand.
pub const SUBCOMMANDS: &[&str] = &[
    "train",
    "merge",
    "verify",
    "evaluate",
    "matrix",
    "synth",
    "backbone-init",
    "bundle",
];

#[derive(Parser, Debug)]
#[command(name = "lorafuse", version, about = "LoRA adapter training, merging and multi-task evaluation")]
#[command(after_help = "Exit codes: 0 ok, 1 other failure, 2 config, 3 data, 4 numeric divergence, \
5 incompatible adapters, 6 task/head mismatch, 7 verify discrepancy above tolerance.\n\
Seed precedence: --seed, then the config file, then LORAFUSE_SEED, then 0.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an adapter and head (or a head only) for one task.
    Train(train::TrainArgs),
    /// Merge adapters into one.
    Merge(merge::MergeArgs),
    /// Check a merged adapter's deltas against the weighted input deltas.
    Verify(merge::VerifyArgs),
    /// Score one task of a bundle on a manifest split.
    Evaluate(evaluate::EvaluateArgs),
    /// Run the single, pairs or triples experiment grid.
    Matrix(matrix::MatrixArgs),
    /// Generate synthetic task manifests.
    Synth(synth::SynthArgs),
    /// Write a randomly initialized backbone.
    BackboneInit(artifacts::BackboneInitArgs),
    /// Package a backbone, adapter and heads into a bundle directory.
    Bundle(artifacts::BundleArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Merge(a) => merge::run_merge(a),
        Command::Verify(a) => merge::run_verify(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Matrix(a) => matrix::run(a),
        Command::Synth(a) => synth::run(a),
        Command::BackboneInit(a) => artifacts::backbone_init(a),
        Command::Bundle(a) => artifacts::bundle(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}

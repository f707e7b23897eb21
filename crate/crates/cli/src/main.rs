//! `enas`: train elastic weight-sharing networks on partly labelled image
//! sets, pick deployment subnets under resource budgets, and reproduce the
//! whole protocol deterministically from seeds.

mod commands;
mod common;
mod config;
mod methods;
mod rows;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

const EXIT_CODES: &str = "EXIT CODES:
  0  success
  1  internal error (anything not covered below)
  2  configuration error: bad flag, unknown or malformed config key, unknown method
  3  data error: impossible split, empty batch, class/shape mismatch
  4  space or architecture error: invalid space file, undecodable encoding, missing calibration
  5  io or binary-format error: unreadable path, corrupt dataset/model file
  6  infeasible resource constraint
  7  training diverged (non-finite loss)
  8  architecture scoring produced a non-finite value";

#[derive(Parser)]
#[command(name = "enas", version, about = "Elastic supernet training and subnet search", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled/unlabelled/test dataset file.
    GenData {
        /// Config file with `data.*` keys.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one method on a dataset; writes a model file and a step log.
    Train {
        /// Config file with `method`, `space`, and `train.*` keys.
        #[arg(long)]
        config: PathBuf,
        /// Dataset file from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (model.enas, metrics.ndjson).
        #[arg(long)]
        out: PathBuf,
        /// Training seed (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's `method`.
        #[arg(long)]
        method: Option<String>,
        /// Overrides the config's `space` (name or space-file path).
        #[arg(long)]
        space: Option<String>,
        /// Narrowed-candidate file from `narrow` (required by matchnas-narrow).
        #[arg(long)]
        narrowed: Option<PathBuf>,
    },
    /// Score random architectures under each resource budget and report the
    /// winners.
    Search {
        /// Space name or space-file path.
        #[arg(long)]
        space: String,
        /// Budget file: one `flops <= N` or `params <= N` per line.
        #[arg(long)]
        constraints: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Scoring seed (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Optional config file with `search.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Like `search`, but writes a candidate file that `train --narrowed`
    /// consumes.
    Narrow {
        #[arg(long)]
        space: String,
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a trained model on a dataset's test split and append result
    /// rows.
    Eval {
        /// Model file from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Method label recorded in the rows.
        #[arg(long)]
        method: String,
        /// Training seed recorded in the rows.
        #[arg(long)]
        seed: u64,
        /// Result log to append to (ndjson).
        #[arg(long)]
        out: PathBuf,
        /// Architecture to evaluate: `smallest`, `medium`, `largest`, or a
        /// full encoding. Repeatable. Shared models default to all three;
        /// single models to their own architecture.
        #[arg(long)]
        arch: Vec<String>,
    },
    /// Run the full multi-method protocol: train, evaluate smallest, medium,
    /// and largest per seed, write logs and a summary CSV.
    Compare {
        /// Config with `space`, `compare.methods`, `compare.seeds`, `train.*`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Budget file, required when a narrowed method is listed.
        #[arg(long)]
        constraints: Option<PathBuf>,
    },
    /// Rebuild a summary CSV from persisted result logs (never retrains).
    Report {
        /// Result log from `eval` or `compare`.
        #[arg(long)]
        eval_log: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Restrict rows to architectures in this search report.
        #[arg(long)]
        search_report: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data::run(&config, &out, seed),
        Command::Train { config, data, out, seed, method, space, narrowed } => {
            commands::train::run(&config, &data, &out, seed, method, space, narrowed)
        }
        Command::Search { space, constraints, out, seed, config } => {
            commands::search::run(&space, &constraints, &out, seed, config, false)
        }
        Command::Narrow { space, constraints, out, seed, config } => {
            commands::search::run(&space, &constraints, &out, seed, config, true)
        }
        Command::Eval { model, data, method, seed, out, arch } => {
            commands::eval::run(&model, &data, &method, seed, &out, &arch)
        }
        Command::Compare { config, data, out, constraints } => {
            commands::compare::run(&config, &data, &out, constraints)
        }
        Command::Report { eval_log, out, search_report } => {
            commands::report::run(&eval_log, &out, search_report)
        }
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(common::exit_code(&err));
    }
}

//! `dstf`: traffic forecasting from the command line.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

mod commands;
mod config;
mod manifest;
mod pipeline;

use clap::Parser;

use dstf_core::Error;

use commands::{ablate, build_graph, convert, eval, plot, predict, sweep, train};

#[derive(Debug, Parser)]
#[command(name = "dstf", version, about = "Decoupled spatial-temporal traffic forecasting")]
enum Cli {
    /// Convert a raw dataset into the canonical on-disk layout.
    Convert(convert::Args),
    /// Build an adjacency file from sensor distances.
    BuildGraph(build_graph::Args),
    /// Train a model and score it on the test split.
    Train(train::Args),
    /// Score a checkpoint on a split, optionally against the historical
    /// average baseline.
    Eval(eval::Args),
    /// Write per-node, per-horizon predictions as CSV.
    Predict(predict::Args),
    /// Draw observed vs. predicted series from a prediction CSV.
    Plot(plot::Args),
    /// Train a named model variant with parts disabled or rearranged.
    Ablate(ablate::Args),
    /// Train a grid of config overrides and tabulate the results.
    Sweep(sweep::Args),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().expect("write to stderr");
            std::process::exit(code);
        }
    };
    let result = match cli {
        Cli::Convert(args) => convert::run(args),
        Cli::BuildGraph(args) => build_graph::run(args),
        Cli::Train(args) => train::run(args),
        Cli::Eval(args) => eval::run(args),
        Cli::Predict(args) => predict::run(args),
        Cli::Plot(args) => plot::run(args),
        Cli::Ablate(args) => ablate::run(args),
        Cli::Sweep(args) => sweep::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

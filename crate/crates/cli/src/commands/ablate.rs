//! `dstf ablate`: train a named model variant, or just emit its derived
//! config for inspection.

use std::path::PathBuf;

use dstf_core::ablation;
use dstf_core::{Error, Result};

use crate::commands::train;
use crate::config;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Variant name; see `--list`.
    #[arg(long, required_unless_present = "list")]
    variant: Option<String>,
    /// Print the known variant names and exit.
    #[arg(long)]
    list: bool,
    /// Base config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding readings.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Adjacency CSV.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Output directory for the run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the derived config here instead of training.
    #[arg(long)]
    emit: Option<PathBuf>,
    /// Override config values, e.g. `--set train.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

pub fn run(args: Args) -> Result<()> {
    if args.list {
        for name in ablation::VARIANTS {
            println!("{name}");
        }
        return Ok(());
    }
    let variant = args.variant.expect("clap enforces --variant");
    let mut cfg = config::load_config(args.config.as_deref(), &args.sets)?;
    let (model, train_cfg) = ablation::apply_variant(&cfg.model, &cfg.train, &variant)?;
    cfg.model = model;
    cfg.train = train_cfg;

    if let Some(path) = &args.emit {
        config::save_config(&cfg, path)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let require = |opt: Option<PathBuf>, flag: &str| {
        opt.ok_or_else(|| Error::config(format!("--{flag} is required to train")))
    };
    let data = require(args.data, "data")?;
    let graph = require(args.graph, "graph")?;
    let out = require(args.out, "out")?;
    train::execute(cfg, &data, &graph, &out, &format!("ablate:{variant}"))
}

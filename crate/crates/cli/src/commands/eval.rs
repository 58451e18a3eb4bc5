//! `dstf eval`: score a checkpoint on one chronological split, optionally
//! next to the weekly historical-average baseline.

use std::path::PathBuf;

use dstf_core::evaluation::{
    evaluate_historical_average, evaluate_model, fit_historical_average,
};
use dstf_core::model::{Checkpoint, Model};
use dstf_core::Result;

use crate::config::load_config;
use crate::pipeline::{self, SplitName};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Canonical dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Adjacency file.
    #[arg(long)]
    graph: PathBuf,
    /// Per-horizon CSV report destination.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Also score the weekly historical-average baseline on the split.
    #[arg(long)]
    with_baseline: bool,
    /// TOML config; only the `data` section matters here (split fractions,
    /// metric masking) — the checkpoint fixes the model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), &args.sets)?;
    let model = Model::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    cfg.model = model.config.clone();
    let p = pipeline::load(&args.data, &args.graph, &mut cfg)?;

    let windows = p.split(args.split);
    let (report, _) = evaluate_model(
        &model,
        &p.dataset,
        &p.time,
        &p.transitions,
        windows,
        cfg.data.mask_zeros,
    )?;
    println!("model ({:?} split, {} windows):", args.split, windows.len());
    print!("{}", report.render_table());
    if let Some(path) = &args.report {
        std::fs::write(path, report.csv_string())?;
        println!("report -> {}", path.display());
    }

    if args.with_baseline {
        let history = windows[0].start + windows[0].input_len;
        let ha = fit_historical_average(&p.dataset, &p.time, history, cfg.data.mask_zeros)?;
        let ha_report = evaluate_historical_average(
            &ha,
            &p.dataset,
            &p.time,
            windows,
            model.config.out_channels,
            cfg.data.mask_zeros,
        )?;
        println!("historical average ({} history steps):", history);
        print!("{}", ha_report.render_table());
    }
    Ok(())
}

//! `dstf predict`: run a checkpoint over test windows and export the
//! predictions as CSV rows of (timestamp, node, horizon, y_true, y_pred)
//! in original units.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use chrono::NaiveDateTime;

use dstf_core::data::{parse_timestamp, SampleWindow};
use dstf_core::evaluation::evaluate_model;
use dstf_core::model::{Checkpoint, Model};
use dstf_core::{Error, Result};

use crate::config::load_config;
use crate::pipeline;

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
    /// Prediction CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Timestamp of the last observed step of one test window.
    #[arg(long, conflicts_with_all = ["from", "to"])]
    anchor: Option<String>,
    /// Keep test windows anchored at or after this timestamp.
    #[arg(long)]
    from: Option<String>,
    /// Keep test windows anchored at or before this timestamp.
    #[arg(long)]
    to: Option<String>,
    /// TOML config (only the `data` section matters here).
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

    let windows = select_windows(&args, &p)?;
    let (_, predictions) = evaluate_model(
        &model,
        &p.dataset,
        &p.time,
        &p.transitions,
        &windows,
        cfg.data.mask_zeros,
    )?;

    let mut out = BufWriter::new(File::create(&args.out)?);
    writeln!(out, "timestamp,node,horizon,y_true,y_pred")?;
    let mut rows = 0usize;
    for (w, y_hat) in windows.iter().zip(&predictions) {
        for j in 0..w.horizon {
            let t = w.start + w.input_len + j;
            let stamp = p.dataset.timestamps[t].format("%Y-%m-%dT%H:%M:%S");
            for (i, node) in p.dataset.node_ids.iter().enumerate() {
                writeln!(
                    out,
                    "{stamp},{node},{},{},{}",
                    j + 1,
                    p.dataset.readings[[t, i, 0]],
                    y_hat[[j, i, 0]]
                )?;
                rows += 1;
            }
        }
    }
    out.flush()?;
    println!(
        "wrote {rows} rows for {} windows -> {}",
        windows.len(),
        args.out.display()
    );
    Ok(())
}

fn select_windows(args: &Args, p: &pipeline::Pipeline) -> Result<Vec<SampleWindow>> {
    let anchor_time = |w: &SampleWindow| -> NaiveDateTime { p.dataset.timestamps[w.anchor()] };
    if let Some(a) = &args.anchor {
        let ts = parse_timestamp(a)?;
        return match p.test_windows.iter().find(|w| anchor_time(w) == ts) {
            Some(w) => Ok(vec![*w]),
            None => Err(Error::data(format!(
                "anchor {ts} is outside the test range (anchors span {} .. {})",
                anchor_time(&p.test_windows[0]),
                anchor_time(p.test_windows.last().expect("split is never empty"))
            ))),
        };
    }
    let from = args.from.as_deref().map(parse_timestamp).transpose()?;
    let to = args.to.as_deref().map(parse_timestamp).transpose()?;
    let selected: Vec<SampleWindow> = p
        .test_windows
        .iter()
        .filter(|w| {
            let ts = anchor_time(w);
            from.is_none_or(|f| ts >= f) && to.is_none_or(|t| ts <= t)
        })
        .copied()
        .collect();
    if selected.is_empty() {
        return Err(Error::data("no test windows in the requested time range"));
    }
    Ok(selected)
}

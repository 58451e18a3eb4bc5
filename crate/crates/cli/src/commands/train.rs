//! `dstf train`: fit a model and score it on the test split. The run
//! directory receives the resolved config, a manifest, the per-epoch log,
//! the best checkpoint, the test report, and a machine-readable summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dstf_core::data::fit_scaler;
use dstf_core::evaluation::evaluate_model;
use dstf_core::model::Model;
use dstf_core::training::{train, EpochLog};
use dstf_core::Result;

use crate::config::{load_config, save_config, RunConfig};
use crate::manifest::{ManifestFile, RunManifest};
use crate::pipeline;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canonical dataset directory (see `dstf convert`).
    #[arg(long)]
    data: PathBuf,
    /// Adjacency file (see `dstf build-graph`).
    #[arg(long)]
    graph: PathBuf,
    /// Run directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Config override, repeatable: `--set model.k_s=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Manifest command label; `sweep` points use this.
    #[arg(long, hide = true)]
    command_label: Option<String>,
}

/// What a finished run reports back; sweeps aggregate these.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_ran: usize,
    pub optimizer_steps: usize,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub test_mape_pct: f64,
    pub test_mae_by_horizon: Vec<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.sets)?;
    let label = args.command_label.as_deref().unwrap_or("train");
    execute(cfg, &args.data, &args.graph, &args.out, label)
}

/// The full pipeline behind `train`; `ablate` and `sweep` reuse it with
/// their own command label and derived config.
pub fn execute(
    mut cfg: RunConfig,
    data_dir: &Path,
    graph_path: &Path,
    out_dir: &Path,
    command: &str,
) -> Result<()> {
    let p = pipeline::load(data_dir, graph_path, &mut cfg)?;
    cfg.train.validate()?;
    let scaler = fit_scaler(&p.dataset, &p.train_windows)?;

    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest::new(command, cfg.clone(), Some(p.dataset.checksum()));
    let handle = ManifestFile::start(out_dir, &manifest)?;
    save_config(&cfg, &out_dir.join("config.toml"))?;

    let result = fit_and_score(&cfg, &p, scaler, out_dir);
    match &result {
        Ok(()) => handle.finish("ok")?,
        Err(e) => handle.finish(&format!("error: {e}"))?,
    }
    result
}

fn fit_and_score(
    cfg: &RunConfig,
    p: &pipeline::Pipeline,
    scaler: dstf_core::data::Scaler,
    out_dir: &Path,
) -> Result<()> {
    let mut model = Model::new(cfg.model.clone(), scaler, cfg.seed)?;
    println!(
        "training on {} windows ({} val, {} test), {} parameters",
        p.train_windows.len(),
        p.val_windows.len(),
        p.test_windows.len(),
        model.store.num_scalars()
    );

    let log_path = out_dir.join("training_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let header: Vec<String> = std::iter::once("epoch".to_string())
        .chain(std::iter::once("train_loss".to_string()))
        .chain((1..=cfg.model.horizon).map(|h| format!("val_mae_h{h}")))
        .chain(std::iter::once("wall_clock_s".to_string()))
        .collect();
    writeln!(log, "{}", header.join(","))?;

    let mut log_error: Option<std::io::Error> = None;
    let report = train(&mut model, &p.train_data(), &cfg.train, |e: &EpochLog| {
        let mut row = format!("{},{}", e.epoch, e.train_loss);
        for v in &e.val_mae {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(",{}", e.wall_clock_s));
        if let Err(io) = writeln!(log, "{row}").and_then(|_| log.flush()) {
            log_error.get_or_insert(io);
        }
        println!(
            "epoch {:>4}  train {:>9.4}  val {:>9.4}  ({:.1}s)",
            e.epoch, e.train_loss, e.val_mae_overall, e.wall_clock_s
        );
    })?;
    if let Some(io) = log_error {
        return Err(io.into());
    }

    report.best.save(&out_dir.join("checkpoint.json"))?;
    println!(
        "best epoch {} (val mae {:.4}); evaluating the test split",
        report.state.best_epoch, report.state.best_val_mae
    );

    let (test_report, _) = evaluate_model(
        &model,
        &p.dataset,
        &p.time,
        &p.transitions,
        &p.test_windows,
        cfg.data.mask_zeros,
    )?;
    print!("{}", test_report.render_table());
    std::fs::write(out_dir.join("report.csv"), test_report.csv_string())?;

    let summary = RunSummary {
        best_epoch: report.state.best_epoch,
        best_val_mae: report.state.best_val_mae,
        epochs_ran: report.state.epoch,
        optimizer_steps: report.state.global_step,
        test_mae: test_report.overall.mae,
        test_rmse: test_report.overall.rmse,
        test_mape_pct: test_report.overall.mape_pct,
        test_mae_by_horizon: test_report.per_horizon.iter().map(|m| m.mae).collect(),
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

//! `dstf sweep`: train every point of a config grid and collect the
//! per-point summaries into one CSV.

use std::collections::VecDeque;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::Child;

use dstf_core::{Error, Result};

use crate::commands::train::{self, RunSummary};
use crate::config::{self, RunConfig};
use crate::manifest::{ManifestFile, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Base config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canonical dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Adjacency file.
    #[arg(long)]
    graph: PathBuf,
    /// Sweep root; points land in `points/p000`, `points/p001`, ...
    #[arg(long)]
    out: PathBuf,
    /// Grid axis, repeatable: `--grid model.k_s=1,2,3`. Points are the
    /// cartesian product of all axes.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...", required = true)]
    grid: Vec<String>,
    /// Train up to N points concurrently in child processes (1 runs them
    /// here, one after another).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Override applied to every point, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

struct Axis {
    key: String,
    values: Vec<String>,
}

pub fn run(args: Args) -> Result<()> {
    let base = config::load_config(args.config.as_deref(), &args.sets)?;
    let axes = parse_axes(&args.grid)?;
    let combos = cartesian(&axes);
    println!(
        "sweeping {} axes, {} points, {} at a time",
        axes.len(),
        combos.len(),
        args.parallel.max(1)
    );

    let manifest = RunManifest::new("sweep", base.clone(), None);
    let handle = ManifestFile::start(&args.out, &manifest)?;
    let result = run_points(&args, &base, &axes, &combos);
    match &result {
        Ok(()) => handle.finish("ok")?,
        Err(e) => handle.finish(&format!("error: {e}"))?,
    }
    result
}

fn parse_axes(specs: &[String]) -> Result<Vec<Axis>> {
    specs
        .iter()
        .map(|spec| {
            let (key, rest) = spec
                .split_once('=')
                .ok_or_else(|| Error::config(format!("grid axis {spec:?} needs key=v1,v2,...")))?;
            let key = key.trim().to_string();
            let values: Vec<String> = rest.split(',').map(|v| v.trim().to_string()).collect();
            if key.is_empty() || values.iter().any(String::is_empty) {
                return Err(Error::config(format!(
                    "grid axis {spec:?} has an empty key or value"
                )));
            }
            Ok(Axis { key, values })
        })
        .collect()
}

fn cartesian(axes: &[Axis]) -> Vec<Vec<String>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .iter()
            .flat_map(|combo| {
                axis.values.iter().map(move |v| {
                    let mut next = combo.clone();
                    next.push(v.clone());
                    next
                })
            })
            .collect();
    }
    combos
}

fn point_label(i: usize) -> String {
    format!("p{i:03}")
}

fn point_config(base: &RunConfig, assignments: &[String]) -> Result<RunConfig> {
    let mut tree = toml::Value::try_from(base)
        .map_err(|e| Error::config(format!("serialize base config: {e}")))?;
    for spec in assignments {
        config::apply_set(&mut tree, spec)?;
    }
    tree.try_into()
        .map_err(|e| Error::config(format!("grid point {assignments:?}: {e}")))
}

fn run_points(args: &Args, base: &RunConfig, axes: &[Axis], combos: &[Vec<String>]) -> Result<()> {
    let points_dir = args.out.join("points");
    let mut dirs = Vec::with_capacity(combos.len());
    for (i, combo) in combos.iter().enumerate() {
        let label = point_label(i);
        let dir = points_dir.join(&label);
        let assignments: Vec<String> = axes
            .iter()
            .zip(combo)
            .map(|(a, v)| format!("{}={v}", a.key))
            .collect();
        let cfg = point_config(base, &assignments)?;
        dirs.push((label, dir, cfg));
    }

    if args.parallel > 1 {
        spawn_points(args, &dirs)?;
    } else {
        for (label, dir, cfg) in &dirs {
            println!("-- point {label}");
            train::execute(cfg.clone(), &args.data, &args.graph, dir, &format!("sweep:{label}"))?;
        }
    }
    aggregate(args, axes, combos, &dirs)
}

/// Runs points as child `dstf train` processes, at most `--parallel` at
/// once. Child output goes to `child.log` in each point directory.
fn spawn_points(args: &Args, dirs: &[(String, PathBuf, RunConfig)]) -> Result<()> {
    let exe = std::env::current_exe()?;
    let mut running: VecDeque<(String, PathBuf, Child)> = VecDeque::new();
    let mut failures: Vec<String> = Vec::new();
    for (label, dir, cfg) in dirs {
        reap(&mut running, args.parallel - 1, &mut failures)?;
        std::fs::create_dir_all(dir)?;
        let cfg_path = dir.join("point.toml");
        config::save_config(cfg, &cfg_path)?;
        let log = File::create(dir.join("child.log"))?;
        let child = std::process::Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--data")
            .arg(&args.data)
            .arg("--graph")
            .arg(&args.graph)
            .arg("--out")
            .arg(dir)
            .arg("--command-label")
            .arg(format!("sweep:{label}"))
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()?;
        println!("-- point {label} (pid {})", child.id());
        running.push_back((label.clone(), dir.clone(), child));
    }
    reap(&mut running, 0, &mut failures)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::data(failures.join("; ")))
    }
}

/// Waits on the oldest children until at most `keep` are still running.
fn reap(
    running: &mut VecDeque<(String, PathBuf, Child)>,
    keep: usize,
    failures: &mut Vec<String>,
) -> Result<()> {
    while running.len() > keep {
        let (label, dir, mut child) = running.pop_front().expect("len checked");
        let status = child.wait()?;
        if !status.success() {
            failures.push(format!(
                "point {label} exited with {status}; see {}",
                dir.join("child.log").display()
            ));
        }
    }
    Ok(())
}

fn aggregate(
    args: &Args,
    axes: &[Axis],
    combos: &[Vec<String>],
    dirs: &[(String, PathBuf, RunConfig)],
) -> Result<()> {
    let path = args.out.join("summary.csv");
    let mut out = File::create(&path)?;
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    writeln!(
        out,
        "point,{},best_epoch,best_val_mae,test_mae,test_rmse,test_mape_pct",
        keys.join(",")
    )?;
    let mut best: Option<(f64, String, Vec<String>)> = None;
    for ((label, dir, _), combo) in dirs.iter().zip(combos) {
        let text = std::fs::read_to_string(dir.join("summary.json"))?;
        let s: RunSummary = serde_json::from_str(&text)?;
        writeln!(
            out,
            "{label},{},{},{},{},{},{}",
            combo.join(","),
            s.best_epoch,
            s.best_val_mae,
            s.test_mae,
            s.test_rmse,
            s.test_mape_pct
        )?;
        if best.as_ref().is_none_or(|(mae, _, _)| s.test_mae < *mae) {
            best = Some((s.test_mae, label.clone(), combo.clone()));
        }
    }
    if let Some((mae, label, combo)) = best {
        let spec: Vec<String> = keys
            .iter()
            .zip(&combo)
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("best point {label} ({}) test mae {mae:.4}", spec.join(", "));
    }
    println!("wrote {} with {} rows", path.display(), combos.len());
    Ok(())
}

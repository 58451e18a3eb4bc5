//! `dstf plot`: overlay ground truth and horizon-1 predictions from a
//! prediction CSV, one SVG per requested node.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use plotters::prelude::*;

use dstf_core::data::parse_timestamp;
use dstf_core::{Error, Result};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Prediction CSV from `dstf predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Node ids to draw, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    nodes: Vec<String>,
    /// Keep points at or after this timestamp.
    #[arg(long)]
    from: Option<String>,
    /// Keep points at or before this timestamp.
    #[arg(long)]
    to: Option<String>,
    /// Directory for the image files.
    #[arg(long)]
    out: PathBuf,
}

struct Point {
    ts: NaiveDateTime,
    y_true: f64,
    y_pred: f64,
}

pub fn run(args: Args) -> Result<()> {
    let mut by_node: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&args.predictions)
        .map_err(|e| Error::data(format!("{}: {e}", args.predictions.display())))?;
    for record in rdr.records() {
        let record = record?;
        if record.len() < 5 {
            return Err(Error::data(
                "prediction rows need timestamp,node,horizon,y_true,y_pred",
            ));
        }
        let horizon: usize = record[2]
            .parse()
            .map_err(|_| Error::data(format!("bad horizon {:?}", &record[2])))?;
        if horizon != 1 {
            continue;
        }
        let parse_num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::data(format!("bad reading {s:?}")))
        };
        by_node.entry(record[1].to_string()).or_default().push(Point {
            ts: parse_timestamp(&record[0])?,
            y_true: parse_num(&record[3])?,
            y_pred: parse_num(&record[4])?,
        });
    }

    let from = args.from.as_deref().map(parse_timestamp).transpose()?;
    let to = args.to.as_deref().map(parse_timestamp).transpose()?;
    std::fs::create_dir_all(&args.out)?;
    for node in &args.nodes {
        let Some(points) = by_node.get_mut(node) else {
            return Err(Error::data(format!(
                "node {node:?} not present in {}",
                args.predictions.display()
            )));
        };
        points.sort_by_key(|p| p.ts);
        let window: Vec<&Point> = points
            .iter()
            .filter(|p| from.is_none_or(|f| p.ts >= f) && to.is_none_or(|t| p.ts <= t))
            .collect();
        if window.is_empty() {
            return Err(Error::data(format!(
                "empty date range: no horizon-1 predictions for node {node} in it"
            )));
        }
        let path = args.out.join(format!("node_{node}.svg"));
        draw(node, &window, &path)?;
        println!("{} points -> {}", window.len(), path.display());
    }
    Ok(())
}

fn plot_err<'a, E: std::fmt::Display>(node: &'a str, stage: &'a str) -> impl Fn(E) -> Error + 'a {
    move |e| Error::data(format!("plot {node}: {stage}: {e}"))
}

fn draw(node: &str, points: &[&Point], path: &Path) -> Result<()> {
    let t0 = points[0].ts;
    let hours =
        |ts: NaiveDateTime| -> f64 { (ts - t0).num_seconds() as f64 / 3600.0 };
    let mut x_max = hours(points[points.len() - 1].ts);
    if x_max == 0.0 {
        x_max = 1.0;
    }
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in points {
        y_min = y_min.min(p.y_true).min(p.y_pred);
        y_max = y_max.max(p.y_true).max(p.y_pred);
    }
    // A constant series still needs a nonempty axis.
    if y_min == y_max {
        y_min -= 1.0;
        y_max += 1.0;
    }

    let root = SVGBackend::new(path, (960, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err(node, "fill"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("node {node}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, y_min..y_max)
        .map_err(plot_err(node, "axes"))?;
    chart
        .configure_mesh()
        .x_desc(format!("hours since {t0}"))
        .y_desc("reading")
        .draw()
        .map_err(plot_err(node, "mesh"))?;
    chart
        .draw_series(LineSeries::new(
            points.iter().map(|p| (hours(p.ts), p.y_true)),
            &BLACK,
        ))
        .map_err(plot_err(node, "truth series"))?
        .label("observed")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLACK));
    chart
        .draw_series(LineSeries::new(
            points.iter().map(|p| (hours(p.ts), p.y_pred)),
            &RED,
        ))
        .map_err(plot_err(node, "prediction series"))?
        .label("predicted")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], RED));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(plot_err(node, "legend"))?;
    root.present().map_err(plot_err(node, "write"))?;
    Ok(())
}

//! `dstf convert`: raw archive → canonical dataset directory.

use std::path::PathBuf;

use dstf_core::data::{load_readings, parse_timestamp, save_canonical, DatasetLayout};
use dstf_core::{Error, Result};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Raw archive: a wide CSV (metr-la) or an .npy/.npz tensor (pems).
    #[arg(long)]
    input: PathBuf,
    /// Archive layout.
    #[arg(long, value_enum)]
    layout: Layout,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// First reading's timestamp (pems archives carry no time axis).
    #[arg(long)]
    start: Option<String>,
    /// Minutes between readings (pems only).
    #[arg(long)]
    interval_minutes: Option<u32>,
    /// Keep only this channel index (pems tensors bundle several).
    #[arg(long)]
    channel: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Layout {
    #[value(name = "metr-la")]
    MetrLa,
    Pems,
}

pub fn run(args: Args) -> Result<()> {
    let layout = match args.layout {
        Layout::MetrLa => DatasetLayout::MetrLaStyle,
        Layout::Pems => {
            let start = args
                .start
                .as_deref()
                .ok_or_else(|| Error::config("pems layout needs --start"))?;
            let interval_minutes = args
                .interval_minutes
                .ok_or_else(|| Error::config("pems layout needs --interval-minutes"))?;
            DatasetLayout::PemsFlowStyle {
                start: parse_timestamp(start)?,
                interval_minutes,
            }
        }
    };
    let mut ds = load_readings(&args.input, layout)?;
    if let Some(c) = args.channel {
        ds = dstf_core::data::convert::select_channel(&ds, c)?;
    }
    save_canonical(&ds, &args.out)?;
    println!(
        "converted {}: {} steps x {} nodes x {} channels -> {}",
        args.input.display(),
        ds.num_steps(),
        ds.num_nodes(),
        ds.num_channels(),
        args.out.display()
    );
    println!("checksum {}", ds.checksum());
    Ok(())
}

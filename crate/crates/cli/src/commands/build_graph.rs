//! `dstf build-graph`: distance list → adjacency file.

use std::path::PathBuf;

use dstf_core::data::load_canonical;
use dstf_core::graph::{
    connectivity_adjacency, gaussian_kernel_adjacency, read_distance_csv, save_adjacency,
};
use dstf_core::{Error, Result};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Distance CSV with header `from,to,cost`.
    #[arg(long)]
    distances: PathBuf,
    /// Adjacency construction.
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: Kind,
    /// Threshold below which Gaussian-kernel weights become zero.
    #[arg(long, default_value_t = 0.1)]
    kappa: f64,
    /// Output adjacency file.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; maps the CSV's sensor labels to node indices
    /// and fixes the node count.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Node count when no dataset is given (ids must then be indices).
    #[arg(long)]
    num_nodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Kind {
    Gaussian,
    Connectivity,
}

pub fn run(args: Args) -> Result<()> {
    let node_ids = match &args.data {
        Some(dir) => Some(load_canonical(dir)?.node_ids),
        None => None,
    };
    let n = match (&node_ids, args.num_nodes) {
        (Some(ids), _) => ids.len(),
        (None, Some(n)) => n,
        (None, None) => {
            return Err(Error::config("need --data or --num-nodes to fix the node count"))
        }
    };
    let distances = read_distance_csv(&args.distances, node_ids.as_deref())?;
    let adjacency = match args.kind {
        Kind::Gaussian => gaussian_kernel_adjacency(&distances, n, args.kappa)?,
        Kind::Connectivity => {
            let edges: Vec<(usize, usize)> =
                distances.entries.iter().map(|&(f, t, _)| (f, t)).collect();
            connectivity_adjacency(&edges, n)?
        }
    };
    save_adjacency(&adjacency, &args.out)?;
    let nonzero = adjacency.iter().filter(|&&v| v != 0.0).count();
    println!(
        "built {}x{} adjacency with {} nonzero entries -> {}",
        n,
        n,
        nonzero,
        args.out.display()
    );
    Ok(())
}

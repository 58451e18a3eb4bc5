//! Shared plumbing for commands that consume a converted dataset and a
//! prebuilt graph file: loading, config resolution, windowing, splits.

use std::path::Path;

use dstf_core::data::{
    compute_time_features, load_canonical, make_windows, split_windows, SampleWindow,
    TimeFeatures, TrafficDataset,
};
use dstf_core::graph::{load_adjacency, transition_matrices, TransitionSet};
use dstf_core::model::ModelConfig;
use dstf_core::training::TrainData;
use dstf_core::{Error, Result};

use crate::config::RunConfig;

pub struct Pipeline {
    pub dataset: TrafficDataset,
    pub time: TimeFeatures,
    pub transitions: TransitionSet,
    pub train_windows: Vec<SampleWindow>,
    pub val_windows: Vec<SampleWindow>,
    pub test_windows: Vec<SampleWindow>,
}

impl Pipeline {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            dataset: &self.dataset,
            time: &self.time,
            transitions: &self.transitions,
            train_windows: &self.train_windows,
            val_windows: &self.val_windows,
        }
    }

    pub fn split(&self, name: SplitName) -> &[SampleWindow] {
        match name {
            SplitName::Train => &self.train_windows,
            SplitName::Val => &self.val_windows,
            SplitName::Test => &self.test_windows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Loads dataset + graph, resolves the dataset-derived model fields in
/// `cfg`, and carves the chronological window splits.
pub fn load(data_dir: &Path, graph_path: &Path, cfg: &mut RunConfig) -> Result<Pipeline> {
    let dataset = load_canonical(data_dir)?;
    let time = compute_time_features(&dataset)?;
    resolve_model(&mut cfg.model, &dataset, &time)?;

    let adjacency = load_adjacency(graph_path)?;
    if adjacency.nrows() != dataset.num_nodes() {
        return Err(Error::shape(format!(
            "graph has {} nodes, dataset has {}",
            adjacency.nrows(),
            dataset.num_nodes()
        )));
    }
    let transitions = transition_matrices(&adjacency);

    let windows = make_windows(&dataset, cfg.model.input_len, cfg.model.horizon)?;
    let (train_windows, val_windows, test_windows) = split_windows(&windows, &cfg.data.split)?;
    Ok(Pipeline {
        dataset,
        time,
        transitions,
        train_windows,
        val_windows,
        test_windows,
    })
}

/// Fills in the model fields that follow from the dataset (node count,
/// channels, time slots) and cross-checks any explicitly configured value.
pub fn resolve_model(
    model: &mut ModelConfig,
    ds: &TrafficDataset,
    tf: &TimeFeatures,
) -> Result<()> {
    if model.num_nodes == 0 {
        model.num_nodes = ds.num_nodes();
    } else if model.num_nodes != ds.num_nodes() {
        return Err(Error::config(format!(
            "config expects {} nodes, dataset has {}",
            model.num_nodes,
            ds.num_nodes()
        )));
    }
    model.in_channels = ds.num_channels();
    model.slots_per_day = tf.slots_per_day;
    if model.out_channels > ds.num_channels() {
        return Err(Error::config(format!(
            "out_channels = {} exceeds the dataset's {} channels",
            model.out_channels,
            ds.num_channels()
        )));
    }
    Ok(())
}

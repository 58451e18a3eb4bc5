//! Dataset ingestion, time features, windowing, splits and normalization.
//!
//! The canonical on-disk layout is a directory holding `readings.npy`
//! (`T x N x C`, float32), `timestamps.txt` (one ISO-8601 instant per line)
//! and `meta.json` (sampling interval, channel names, node ids). The
//! [`convert`] submodule maps public archive formats onto this layout.

pub mod convert;

use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Raw sensor readings plus their time axis.
#[derive(Debug, Clone)]
pub struct TrafficDataset {
    /// `T_total x N x C`; flow in vehicles/interval or speed in mph.
    pub readings: Array3<f64>,
    /// One instant per time step, strictly increasing, constant spacing.
    pub timestamps: Vec<NaiveDateTime>,
    pub interval_minutes: u32,
    /// Channel names, length `C`.
    pub channels: Vec<String>,
    /// Sensor/node identifiers, length `N`.
    pub node_ids: Vec<String>,
}

impl TrafficDataset {
    pub fn num_steps(&self) -> usize {
        self.readings.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.readings.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.readings.shape()[2]
    }

    /// Checks every invariant; called by all loaders.
    pub fn validate(&self) -> Result<()> {
        let (t, n, c) = self.readings.dim();
        if t == 0 || n == 0 || c == 0 {
            return Err(Error::data(format!(
                "readings must be non-empty, got {t}x{n}x{c}"
            )));
        }
        if self.timestamps.len() != t {
            return Err(Error::data(format!(
                "{} timestamps for {t} reading steps",
                self.timestamps.len()
            )));
        }
        if self.channels.len() != c {
            return Err(Error::data(format!(
                "{} channel names for {c} channels",
                self.channels.len()
            )));
        }
        if self.node_ids.len() != n {
            return Err(Error::data(format!(
                "{} node ids for {n} nodes",
                self.node_ids.len()
            )));
        }
        if self.interval_minutes == 0 {
            return Err(Error::data("interval_minutes must be positive"));
        }
        let step = chrono::Duration::minutes(self.interval_minutes as i64);
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if pair[1] - pair[0] != step {
                return Err(Error::data(format!(
                    "timestamp spacing breaks at step {}: {} -> {} (expected {} min apart)",
                    i + 1,
                    pair[0],
                    pair[1],
                    self.interval_minutes
                )));
            }
        }
        for ((ti, ni, ci), &v) in self.readings.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "non-finite reading {v} at step {ti}, node {ni}, channel {ci}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over readings, timestamps and interval; identifies the dataset
    /// in run manifests.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &v in self.readings.iter() {
            h.update(v.to_le_bytes());
        }
        for ts in &self.timestamps {
            h.update(ts.and_utc().timestamp().to_le_bytes());
        }
        h.update(self.interval_minutes.to_le_bytes());
        format!("sha256:{:x}", h.finalize())
    }
}

/// Per-step discrete time indices driving the time-slot embeddings.
#[derive(Debug, Clone)]
pub struct TimeFeatures {
    /// Time-of-day slot per step, in `[0, slots_per_day)`.
    pub tod_index: Vec<usize>,
    /// Day-of-week per step, Monday = 0, in `[0, 7)`.
    pub dow_index: Vec<usize>,
    /// `1440 / interval_minutes`.
    pub slots_per_day: usize,
}

pub const DAYS_PER_WEEK: usize = 7;

/// Derives time-of-day / day-of-week indices from the dataset's timestamps.
pub fn compute_time_features(ds: &TrafficDataset) -> Result<TimeFeatures> {
    if 1440 % ds.interval_minutes != 0 {
        return Err(Error::data(format!(
            "interval of {} minutes does not divide the day",
            ds.interval_minutes
        )));
    }
    let slots_per_day = (1440 / ds.interval_minutes) as usize;
    let seconds_per_slot = ds.interval_minutes as u32 * 60;
    let mut tod = Vec::with_capacity(ds.timestamps.len());
    let mut dow = Vec::with_capacity(ds.timestamps.len());
    for ts in &ds.timestamps {
        tod.push((ts.num_seconds_from_midnight() / seconds_per_slot) as usize);
        dow.push(ts.weekday().num_days_from_monday() as usize);
    }
    Ok(TimeFeatures {
        tod_index: tod,
        dow_index: dow,
        slots_per_day,
    })
}

/// One training/evaluation sample: `input_len` observed steps followed by
/// `horizon` target steps. Holds indices into the dataset; slices are views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleWindow {
    /// Index of the first input step.
    pub start: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl SampleWindow {
    /// Index of the last input step.
    pub fn anchor(&self) -> usize {
        self.start + self.input_len - 1
    }

    /// Input slice, `input_len x N x C`.
    pub fn x<'a>(&self, ds: &'a TrafficDataset) -> ArrayView3<'a, f64> {
        ds.readings
            .slice(s![self.start..self.start + self.input_len, .., ..])
    }

    /// Target slice, `horizon x N x c_out`.
    pub fn y<'a>(&self, ds: &'a TrafficDataset, c_out: usize) -> ArrayView3<'a, f64> {
        let from = self.start + self.input_len;
        ds.readings.slice(s![from..from + self.horizon, .., ..c_out])
    }

    /// Time-of-day indices of the input steps.
    pub fn x_tod<'a>(&self, tf: &'a TimeFeatures) -> &'a [usize] {
        &tf.tod_index[self.start..self.start + self.input_len]
    }

    /// Day-of-week indices of the input steps.
    pub fn x_dow<'a>(&self, tf: &'a TimeFeatures) -> &'a [usize] {
        &tf.dow_index[self.start..self.start + self.input_len]
    }
}

/// All stride-1 windows in chronological order:
/// `T_total - (input_len + horizon) + 1` of them.
pub fn make_windows(ds: &TrafficDataset, input_len: usize, horizon: usize) -> Result<Vec<SampleWindow>> {
    let t_total = ds.num_steps();
    let span = input_len + horizon;
    if input_len == 0 || horizon == 0 {
        return Err(Error::config("window lengths must be positive"));
    }
    if t_total < span {
        return Err(Error::data(format!(
            "{t_total} steps cannot fit one {input_len}+{horizon} window"
        )));
    }
    Ok((0..=t_total - span)
        .map(|start| SampleWindow {
            start,
            input_len,
            horizon,
        })
        .collect())
}

/// Chronological train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} = {f} must lie in (0, 1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Partitions windows chronologically. Train and val sizes are the floor of
/// their fraction times the window count; the remainder goes to test.
pub fn split_windows(
    windows: &[SampleWindow],
    spec: &SplitSpec,
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>)> {
    spec.validate()?;
    let w = windows.len();
    let n_train = (spec.train_frac * w as f64).floor() as usize;
    let n_val = (spec.val_frac * w as f64).floor() as usize;
    let n_test = w - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::data(format!(
            "split of {w} windows leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok((
        windows[..n_train].to_vec(),
        windows[n_train..n_train + n_val].to_vec(),
        windows[n_train + n_val..].to_vec(),
    ))
}

/// Per-channel z-score normalization fitted on the training inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits mean/std (population) per channel over the reading steps covered by
/// the training windows' inputs, each step counted once.
pub fn fit_scaler(ds: &TrafficDataset, train_windows: &[SampleWindow]) -> Result<Scaler> {
    if train_windows.is_empty() {
        return Err(Error::data("cannot fit scaler on zero training windows"));
    }
    let mut covered = vec![false; ds.num_steps()];
    for w in train_windows {
        for step in w.start..w.start + w.input_len {
            covered[step] = true;
        }
    }
    let c = ds.num_channels();
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for (step, &inc) in covered.iter().enumerate() {
        if !inc {
            continue;
        }
        count += ds.num_nodes();
        for ch in 0..c {
            for node in 0..ds.num_nodes() {
                mean[ch] += ds.readings[[step, node, ch]];
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for (step, &inc) in covered.iter().enumerate() {
        if !inc {
            continue;
        }
        for ch in 0..c {
            for node in 0..ds.num_nodes() {
                let d = ds.readings[[step, node, ch]] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let mut std = vec![0.0; c];
    for ch in 0..c {
        std[ch] = (var[ch] / count as f64).sqrt();
        if std[ch] <= 0.0 {
            return Err(Error::data(format!(
                "channel {} ({}) is constant on the training split; cannot standardize",
                ch, ds.channels[ch]
            )));
        }
    }
    Ok(Scaler { mean, std })
}

/// `(v - mean) / std` per channel.
pub fn apply_scaler(x: ArrayView3<'_, f64>, scaler: &Scaler) -> Array3<f64> {
    let mut out = x.to_owned();
    for (ch, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        lane.mapv_inplace(|v| (v - scaler.mean[ch]) / scaler.std[ch]);
    }
    out
}

/// `v * std + mean` per channel.
pub fn invert_scaler(x: ArrayView3<'_, f64>, scaler: &Scaler) -> Array3<f64> {
    let mut out = x.to_owned();
    for (ch, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        lane.mapv_inplace(|v| v * scaler.std[ch] + scaler.mean[ch]);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Meta {
    interval_minutes: u32,
    channels: Vec<String>,
    node_ids: Vec<String>,
}

/// Writes the canonical directory layout (`readings.npy`, `timestamps.txt`,
/// `meta.json`).
pub fn save_canonical(ds: &TrafficDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let readings32 = ds.readings.mapv(|v| v as f32);
    ndarray_npy::write_npy(dir.join("readings.npy"), &readings32)?;
    let lines: Vec<String> = ds
        .timestamps
        .iter()
        .map(|ts| ts.format("%Y-%m-%dT%H:%M:%S").to_string())
        .collect();
    fs::write(dir.join("timestamps.txt"), lines.join("\n") + "\n")?;
    let meta = Meta {
        interval_minutes: ds.interval_minutes,
        channels: ds.channels.clone(),
        node_ids: ds.node_ids.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a canonical dataset directory.
pub fn load_canonical(dir: &Path) -> Result<TrafficDataset> {
    let readings_path = dir.join("readings.npy");
    if !readings_path.exists() {
        return Err(Error::data(format!(
            "no canonical dataset at {}: readings.npy missing",
            dir.display()
        )));
    }
    let readings32: Array3<f32> = ndarray_npy::read_npy(&readings_path)?;
    let readings = readings32.mapv(|v| v as f64);
    let ts_text = fs::read_to_string(dir.join("timestamps.txt"))?;
    let timestamps = ts_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_timestamp)
        .collect::<Result<Vec<_>>>()?;
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let ds = TrafficDataset {
        readings,
        timestamps,
        interval_minutes: meta.interval_minutes,
        channels: meta.channels,
        node_ids: meta.node_ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parses `2012-03-01T00:00:00`, with a space accepted in place of the `T`.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .map_err(|e| Error::data(format!("cannot parse timestamp {s:?}: {e}")))
}

/// Which raw archive format [`load_readings`] should expect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    /// Wide CSV: timestamp column followed by one column per sensor.
    MetrLaStyle,
    /// Dense `.npz`/`.npy` flow tensor plus an externally supplied start time.
    PemsFlowStyle {
        start: NaiveDateTime,
        interval_minutes: u32,
    },
    /// The canonical directory layout produced by `dstf convert`.
    Canonical,
}

/// Loads raw readings in any supported layout into a validated dataset.
pub fn load_readings(path: &Path, layout: DatasetLayout) -> Result<TrafficDataset> {
    match layout {
        DatasetLayout::MetrLaStyle => convert::read_metr_la_csv(path),
        DatasetLayout::PemsFlowStyle {
            start,
            interval_minutes,
        } => convert::read_pems_array(path, start, interval_minutes),
        DatasetLayout::Canonical => load_canonical(path),
    }
}

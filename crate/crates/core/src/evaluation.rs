//! Per-horizon masked metrics (MAE, RMSE, MAPE), the Historical Average
//! baseline, and batched model evaluation over a window set.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_scaler, SampleWindow, TimeFeatures, TrafficDataset, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::graph::TransitionSet;
use crate::model::Model;

/// Metrics for one future step (or pooled across all of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean absolute percentage error, already multiplied by 100.
    pub mape_pct: f64,
    /// Cells that survived masking.
    pub n_samples: usize,
}

/// Evaluation result: one row per future step plus the pooled row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_horizon: Vec<HorizonMetrics>,
    pub overall: HorizonMetrics,
}

impl MetricReport {
    /// Metrics for 1-based future step `h`.
    pub fn horizon(&self, h: usize) -> &HorizonMetrics {
        &self.per_horizon[h - 1]
    }

    /// Plain-text table, one row per horizon plus the pooled average.
    pub fn render_table(&self) -> String {
        let mut out = String::from("horizon      mae     rmse    mape%         n\n");
        for (i, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!(
                "{:>7} {:>8.3} {:>8.3} {:>8.3} {:>9}\n",
                i + 1,
                m.mae,
                m.rmse,
                m.mape_pct,
                m.n_samples
            ));
        }
        let m = &self.overall;
        out.push_str(&format!(
            "{:>7} {:>8.3} {:>8.3} {:>8.3} {:>9}\n",
            "avg", m.mae, m.rmse, m.mape_pct, m.n_samples
        ));
        out
    }

    /// CSV body with the same rows the eval command writes.
    pub fn csv_string(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape_pct,n_samples\n");
        for (i, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                m.mae,
                m.rmse,
                m.mape_pct,
                m.n_samples
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    sum_abs: f64,
    sum_sq: f64,
    sum_ape: f64,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, pred: f64, truth: f64) {
        let d = pred - truth;
        self.sum_abs += d.abs();
        self.sum_sq += d * d;
        self.sum_ape += d.abs() / truth.abs();
        self.count += 1;
    }

    fn merge(&mut self, other: &Accumulator) {
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.sum_ape += other.sum_ape;
        self.count += other.count;
    }

    fn finish(&self) -> HorizonMetrics {
        if self.count == 0 {
            return HorizonMetrics {
                mae: 0.0,
                rmse: 0.0,
                mape_pct: 0.0,
                n_samples: 0,
            };
        }
        let n = self.count as f64;
        HorizonMetrics {
            mae: self.sum_abs / n,
            rmse: (self.sum_sq / n).sqrt(),
            mape_pct: 100.0 * self.sum_ape / n,
            n_samples: self.count,
        }
    }
}

/// Streaming metric accumulation across windows. All three metrics share
/// one masked index set: cells whose target is exactly 0 are dropped when
/// `mask_zeros` is on, and rejected (MAPE would divide by zero) when off.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    horizons: Vec<Accumulator>,
    mask_zeros: bool,
    unmasked_zeros: usize,
}

impl ReportBuilder {
    pub fn new(horizon: usize, mask_zeros: bool) -> Self {
        Self {
            horizons: vec![Accumulator::default(); horizon],
            mask_zeros,
            unmasked_zeros: 0,
        }
    }

    /// Folds one window's `T_f x N x C` prediction/target pair in.
    pub fn add_window(&mut self, y_hat: ArrayView3<'_, f64>, y: ArrayView3<'_, f64>) {
        assert_eq!(y_hat.dim(), y.dim(), "prediction/target shape");
        assert_eq!(y.dim().0, self.horizons.len(), "horizon count");
        for (j, acc) in self.horizons.iter_mut().enumerate() {
            for (p, t) in y_hat
                .index_axis(Axis(0), j)
                .iter()
                .zip(y.index_axis(Axis(0), j).iter())
            {
                if *t == 0.0 {
                    if self.mask_zeros {
                        continue;
                    }
                    self.unmasked_zeros += 1;
                    continue;
                }
                acc.add(*p, *t);
            }
        }
    }

    pub fn finish(self) -> Result<MetricReport> {
        if self.unmasked_zeros > 0 {
            return Err(Error::data(format!(
                "{} zero readings with masking off make MAPE undefined; \
                 enable mask_zeros to exclude failed sensors",
                self.unmasked_zeros
            )));
        }
        let mut total = Accumulator::default();
        for acc in &self.horizons {
            total.merge(acc);
        }
        Ok(MetricReport {
            per_horizon: self.horizons.iter().map(Accumulator::finish).collect(),
            overall: total.finish(),
        })
    }
}

/// Metrics for a single prediction/target pair in original units.
pub fn metrics(
    y_hat: ArrayView3<'_, f64>,
    y: ArrayView3<'_, f64>,
    mask_zeros: bool,
) -> Result<MetricReport> {
    let mut b = ReportBuilder::new(y.dim().0, mask_zeros);
    b.add_window(y_hat, y);
    b.finish()
}

/// Weekly-slot mean predictor: one value per (day-of-week, time-of-day,
/// node, channel), with the per-node mean filling slots that never occur
/// (or whose every reading was masked) in the history.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    /// Indexed `dow * slots_per_day + tod`; each entry is `N x C`.
    slot_means: Vec<Array2<f64>>,
    slots_per_day: usize,
}

impl HistoricalAverage {
    /// Prediction for any step falling on the given weekly slot.
    pub fn predict_step(&self, tod: usize, dow: usize) -> &Array2<f64> {
        &self.slot_means[dow * self.slots_per_day + tod]
    }
}

/// Fits the baseline on the first `history_steps` readings (the train and
/// validation region). Needs at least one full week so every weekly slot
/// had the chance to occur.
pub fn fit_historical_average(
    ds: &TrafficDataset,
    tf: &TimeFeatures,
    history_steps: usize,
    mask_zeros: bool,
) -> Result<HistoricalAverage> {
    let week = DAYS_PER_WEEK * tf.slots_per_day;
    if history_steps < week {
        return Err(Error::data(format!(
            "historical average needs a full week of history \
             ({week} steps at this interval), got {history_steps}"
        )));
    }
    if history_steps > ds.num_steps() {
        return Err(Error::data(format!(
            "history of {history_steps} steps exceeds the dataset ({})",
            ds.num_steps()
        )));
    }
    let (n, c) = (ds.num_nodes(), ds.num_channels());
    let n_slots = week;
    let mut sums = vec![Array2::<f64>::zeros((n, c)); n_slots];
    let mut counts = vec![Array2::<f64>::zeros((n, c)); n_slots];
    let mut node_sum = Array2::<f64>::zeros((n, c));
    let mut node_count = Array2::<f64>::zeros((n, c));

    for t in 0..history_steps {
        let slot = tf.dow_index[t] * tf.slots_per_day + tf.tod_index[t];
        let frame = ds.readings.index_axis(Axis(0), t);
        for ((i, k), &v) in frame.indexed_iter() {
            if mask_zeros && v == 0.0 {
                continue;
            }
            sums[slot][[i, k]] += v;
            counts[slot][[i, k]] += 1.0;
            node_sum[[i, k]] += v;
            node_count[[i, k]] += 1.0;
        }
    }

    let node_mean = Array2::from_shape_fn((n, c), |(i, k)| {
        if node_count[[i, k]] > 0.0 {
            node_sum[[i, k]] / node_count[[i, k]]
        } else {
            0.0
        }
    });
    let slot_means = (0..n_slots)
        .map(|s| {
            Array2::from_shape_fn((n, c), |(i, k)| {
                if counts[s][[i, k]] > 0.0 {
                    sums[s][[i, k]] / counts[s][[i, k]]
                } else {
                    node_mean[[i, k]]
                }
            })
        })
        .collect();
    Ok(HistoricalAverage {
        slot_means,
        slots_per_day: tf.slots_per_day,
    })
}

/// Runs the baseline over `windows` exactly the way the model is scored.
pub fn evaluate_historical_average(
    ha: &HistoricalAverage,
    ds: &TrafficDataset,
    tf: &TimeFeatures,
    windows: &[SampleWindow],
    out_channels: usize,
    mask_zeros: bool,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::data("no evaluation windows"));
    }
    let horizon = windows[0].horizon;
    let mut builder = ReportBuilder::new(horizon, mask_zeros);
    for w in windows {
        let y = w.y(ds, out_channels);
        let mut y_hat = Array3::zeros(y.dim());
        for j in 0..horizon {
            let t = w.start + w.input_len + j;
            let pred = ha.predict_step(tf.tod_index[t], tf.dow_index[t]);
            y_hat
                .index_axis_mut(Axis(0), j)
                .assign(&pred.slice(ndarray::s![.., ..out_channels]));
        }
        builder.add_window(y_hat.view(), y);
    }
    builder.finish()
}

/// Batched model evaluation: forward pass on every window (in parallel),
/// metrics per horizon, and the raw predictions for downstream export.
/// The reduction order is fixed, so window order cannot change the report
/// beyond float roundoff.
pub fn evaluate_model(
    model: &Model,
    ds: &TrafficDataset,
    tf: &TimeFeatures,
    transitions: &TransitionSet,
    windows: &[SampleWindow],
    mask_zeros: bool,
) -> Result<(MetricReport, Vec<Array3<f64>>)> {
    if windows.is_empty() {
        return Err(Error::data("no evaluation windows"));
    }
    let c_out = model.config.out_channels;
    let predictions: Vec<Array3<f64>> = windows
        .par_iter()
        .map(|w| {
            let x = apply_scaler(w.x(ds), &model.scaler);
            model.predict(x.view(), w.x_tod(tf), w.x_dow(tf), transitions)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut builder = ReportBuilder::new(model.config.horizon, mask_zeros);
    for (w, y_hat) in windows.iter().zip(&predictions) {
        builder.add_window(y_hat.view(), w.y(ds, c_out));
    }
    Ok((builder.finish()?, predictions))
}

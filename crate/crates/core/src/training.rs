//! Training loop: curriculum-truncated masked MAE in original units,
//! Adam updates with optional gradient clipping, and early stopping on
//! validation MAE. Each window gets its own tape; gradients are summed
//! across the batch in a fixed order, so runs are bitwise reproducible
//! for a given seed regardless of worker count.

use std::time::Instant;

use ndarray::{Array2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{apply_scaler, SampleWindow, TimeFeatures, TrafficDataset};
use crate::error::{Error, Result};
use crate::graph::TransitionSet;
use crate::model::{forward_on_tape, Checkpoint, Model};
use crate::params::{clip_global_norm, Adam, Bound};

/// Optimization hyperparameters. All fields have serde defaults, so a
/// config file only needs the keys it wants to change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between increments of the supervised horizon.
    pub cl_growth_steps: usize,
    /// Maximum global gradient norm; `None` disables clipping. Config
    /// files have no null, so 0 (or any nonpositive value) means off.
    #[serde(with = "clip_serde")]
    pub grad_clip: Option<f64>,
    /// Seed for batch shuffling (model init has its own seed).
    pub seed: u64,
    /// Excludes zero readings from the loss; failed sensors report 0.
    pub mask_zeros: bool,
    /// Grow the supervised horizon from 1 instead of training on all
    /// future steps from the start.
    pub use_curriculum: bool,
    /// Worker threads for per-window passes; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 150,
            patience: 15,
            cl_growth_steps: 2000,
            grad_clip: Some(5.0),
            seed: 42,
            mask_zeros: true,
            use_curriculum: true,
            threads: 0,
        }
    }
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let x = f64::deserialize(d)?;
        Ok(if x > 0.0 { Some(x) } else { None })
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience must be in 1..=max_epochs ({} given, max_epochs {})",
                self.patience, self.max_epochs
            )));
        }
        if self.cl_growth_steps == 0 {
            return Err(Error::config("cl_growth_steps must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Running counters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Optimizer steps taken (skipped all-masked batches do not count).
    pub global_step: usize,
    pub current_horizon_level: usize,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    /// Mean training loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-batch training loss in original units.
    pub step_losses: Vec<f64>,
    /// Batches whose targets were entirely masked: the loss is defined
    /// as 0 and no optimizer step is taken.
    pub all_masked_batches: usize,
}

impl TrainState {
    fn new() -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            current_horizon_level: 1,
            best_val_mae: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            epoch_losses: Vec::new(),
            step_losses: Vec::new(),
            all_masked_batches: 0,
        }
    }
}

/// Mean absolute error over the first `horizon_level` future steps, all
/// nodes and channels. With `mask_zeros`, cells whose target is exactly 0
/// are dropped from both numerator and denominator; a fully masked input
/// yields 0 (callers keep their own warning counters).
pub fn mae_loss(
    y_hat: ArrayView3<'_, f64>,
    y: ArrayView3<'_, f64>,
    horizon_level: usize,
    mask_zeros: bool,
) -> f64 {
    assert_eq!(y_hat.dim(), y.dim(), "prediction/target shape");
    assert!(horizon_level >= 1 && horizon_level <= y.dim().0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..horizon_level {
        for (p, t) in y_hat
            .index_axis(Axis(0), j)
            .iter()
            .zip(y.index_axis(Axis(0), j).iter())
        {
            if mask_zeros && *t == 0.0 {
                continue;
            }
            sum += (p - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Supervised horizon after `global_step` optimizer steps: starts at one
/// future step and adds one every `cl_growth_steps`, capped at `horizon`.
pub fn curriculum_level(global_step: usize, cl_growth_steps: usize, horizon: usize) -> usize {
    horizon.min(1 + global_step / cl_growth_steps)
}

/// Patience counter over validation MAE. Only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's validation MAE; returns whether it improved the best.
    pub fn observe(&mut self, val_mae: f64) -> bool {
        if val_mae < self.best {
            self.best = val_mae;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Everything the loop reads besides the model: raw readings, calendar
/// indices, transition matrices, and the window split.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a TrafficDataset,
    pub time: &'a TimeFeatures,
    pub transitions: &'a TransitionSet,
    pub train_windows: &'a [SampleWindow],
    pub val_windows: &'a [SampleWindow],
}

/// One row of the per-epoch log (the CSV the CLI writes).
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation MAE per future step, always over the full horizon.
    pub val_mae: Vec<f64>,
    /// Pooled over all horizons; the early-stopping criterion.
    pub val_mae_overall: f64,
    pub wall_clock_s: f64,
}

/// Outcome of [`train`]. The model itself is left loaded with the best
/// parameters, which `best` duplicates in serializable form.
#[derive(Debug)]
pub struct TrainReport {
    pub best: Checkpoint,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Sum of masked absolute errors on the tape, over the first `level`
/// future steps, plus the number of unmasked cells. Dividing the sum's
/// value by the count gives the batch loss; backpropagating from the sum
/// and rescaling by the batch-wide count gives its gradient.
fn masked_abs_sum(
    b: &mut Bound<'_>,
    y_hat: &[Var],
    y: ArrayView3<'_, f64>,
    level: usize,
    mask_zeros: bool,
) -> (Var, usize) {
    assert!(level >= 1 && level <= y_hat.len());
    let mut parts = Vec::with_capacity(level);
    let mut count = 0usize;
    for (j, &pred) in y_hat.iter().take(level).enumerate() {
        let target = y.index_axis(Axis(0), j).to_owned();
        let target_cst = b.cst(target.clone());
        let err = b.tape.sub(pred, target_cst);
        let err = if mask_zeros {
            let mask = target.mapv(|v| if v == 0.0 { 0.0 } else { 1.0 });
            count += mask.iter().filter(|&&m| m == 1.0).count();
            let mask_cst = b.cst(mask);
            b.tape.mul(err, mask_cst)
        } else {
            count += target.len();
            err
        };
        let abs = b.tape.abs(err);
        parts.push(b.tape.sum_all(abs));
    }
    let total = b.tape.add_n(&parts);
    (total, count)
}

struct WindowGrad {
    abs_sum: f64,
    count: usize,
    grads: Vec<Option<Array2<f64>>>,
}

fn window_pass(
    model: &Model,
    data: &TrainData<'_>,
    w: &SampleWindow,
    level: usize,
    mask_zeros: bool,
) -> Result<WindowGrad> {
    let x = apply_scaler(w.x(data.dataset), &model.scaler);
    let mut b = Bound::new(&model.store);
    let fwd = forward_on_tape(
        &mut b,
        &model.config,
        &model.params,
        x.view(),
        w.x_tod(data.time),
        w.x_dow(data.time),
        data.transitions,
        &model.scaler,
    )?;
    let y = w.y(data.dataset, model.config.out_channels);
    let (sum, count) = masked_abs_sum(&mut b, &fwd.y_hat, y, level, mask_zeros);
    let abs_sum = b.tape.value(sum)[[0, 0]];
    let grads = b.tape.backward(sum);
    Ok(WindowGrad {
        abs_sum,
        count,
        grads: b.param_grads(&grads),
    })
}

/// Masked MAE of the current parameters on `windows`: one value per future
/// step plus the pooled value across all of them. Validation never applies
/// curriculum truncation.
pub fn validation_mae(
    model: &Model,
    data: &TrainData<'_>,
    windows: &[SampleWindow],
    mask_zeros: bool,
) -> Result<(Vec<f64>, f64)> {
    let horizon = model.config.horizon;
    let per_window: Vec<(Vec<f64>, Vec<usize>)> = windows
        .par_iter()
        .map(|w| -> Result<(Vec<f64>, Vec<usize>)> {
            let x = apply_scaler(w.x(data.dataset), &model.scaler);
            let y_hat = model.predict(
                x.view(),
                w.x_tod(data.time),
                w.x_dow(data.time),
                data.transitions,
            )?;
            let y = w.y(data.dataset, model.config.out_channels);
            let mut sums = vec![0.0; horizon];
            let mut counts = vec![0usize; horizon];
            for j in 0..horizon {
                for (p, t) in y_hat
                    .index_axis(Axis(0), j)
                    .iter()
                    .zip(y.index_axis(Axis(0), j).iter())
                {
                    if mask_zeros && *t == 0.0 {
                        continue;
                    }
                    sums[j] += (p - t).abs();
                    counts[j] += 1;
                }
            }
            Ok((sums, counts))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for (s, c) in &per_window {
        for j in 0..horizon {
            sums[j] += s[j];
            counts[j] += c[j];
        }
    }
    let per_horizon: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let total_count: usize = counts.iter().sum();
    let overall = if total_count == 0 {
        0.0
    } else {
        sums.iter().sum::<f64>() / total_count as f64
    };
    Ok((per_horizon, overall))
}

/// Runs the full optimization loop: shuffled batches, curriculum-truncated
/// masked MAE, Adam with optional clipping, per-epoch validation over the
/// full horizon, and early stopping. `on_epoch` fires after each epoch with
/// the log row just produced. On return the model holds the parameters of
/// its best validation epoch.
pub fn train(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train_windows.is_empty() {
        return Err(Error::data("training split has no windows"));
    }
    if data.val_windows.is_empty() {
        return Err(Error::data("validation split has no windows"));
    }
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| train_loop(model, data, cfg, &mut on_epoch))
    } else {
        train_loop(model, data, cfg, &mut on_epoch)
    }
}

fn train_loop(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.checkpoint();
    let mut log = Vec::new();

    let shapes: Vec<(usize, usize)> = model
        .store
        .ids()
        .map(|id| model.store.value(id).dim())
        .collect();
    let mut order: Vec<usize> = (0..data.train_windows.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let level = if cfg.use_curriculum {
                curriculum_level(state.global_step, cfg.cl_growth_steps, model.config.horizon)
            } else {
                model.config.horizon
            };
            state.current_horizon_level = level;

            let results = chunk
                .par_iter()
                .map(|&wi| {
                    window_pass(model, data, &data.train_windows[wi], level, cfg.mask_zeros)
                })
                .collect::<Result<Vec<WindowGrad>>>()
                .map_err(|e| match e {
                    Error::Numeric(inner) => Error::numeric(format!(
                        "{inner} (epoch {epoch}, batch {batch_idx})"
                    )),
                    other => Error::data(format!(
                        "training aborted in epoch {epoch}, batch {batch_idx}: {other}"
                    )),
                })?;

            let total_count: usize = results.iter().map(|r| r.count).sum();
            if total_count == 0 {
                state.all_masked_batches += 1;
                state.step_losses.push(0.0);
                continue;
            }
            let loss = results.iter().map(|r| r.abs_sum).sum::<f64>() / total_count as f64;
            if !loss.is_finite() {
                let starts: Vec<usize> =
                    chunk.iter().map(|&wi| data.train_windows[wi].start).collect();
                return Err(Error::numeric(format!(
                    "non-finite training loss {loss} in epoch {epoch}, batch {batch_idx} \
                     (window starts {starts:?})"
                )));
            }

            let mut dense: Vec<Array2<f64>> =
                shapes.iter().map(|&dim| Array2::zeros(dim)).collect();
            for r in &results {
                for (acc, g) in dense.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        *acc += g;
                    }
                }
            }
            let inv = 1.0 / total_count as f64;
            for g in dense.iter_mut() {
                g.mapv_inplace(|x| x * inv);
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut dense, max_norm);
            }
            adam.step(&mut model.store, &dense);

            state.global_step += 1;
            state.step_losses.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;
        }

        state.epoch = epoch;
        let train_loss = if epoch_batches == 0 {
            0.0
        } else {
            epoch_sum / epoch_batches as f64
        };
        state.epoch_losses.push(train_loss);

        let (val_mae, overall) = validation_mae(model, data, data.val_windows, cfg.mask_zeros)?;
        if stopper.observe(overall) {
            state.best_val_mae = overall;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best = model.checkpoint();
        } else {
            state.epochs_since_improvement += 1;
        }

        let entry = EpochLog {
            epoch,
            train_loss,
            val_mae,
            val_mae_overall: overall,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        if stopper.should_stop() {
            break;
        }
    }

    model.store.load(&best.params)?;
    Ok(TrainReport { best, state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_time_features, make_windows, Scaler};
    use crate::graph::transition_matrices;
    use crate::model::ModelConfig;
    use crate::synthetic::{ar1_diffusion_dataset, SyntheticSpec};
    use ndarray::{Array3, ArrayView3};

    fn dataset_from_readings(readings: Array3<f64>) -> TrafficDataset {
        let (steps, n, c) = readings.dim();
        let start = chrono::NaiveDateTime::parse_from_str("2012-03-05T00:00:00", "%Y-%m-%dT%H:%M:%S")
            .unwrap();
        TrafficDataset {
            readings,
            timestamps: (0..steps)
                .map(|i| start + chrono::Duration::minutes(5 * i as i64))
                .collect(),
            interval_minutes: 5,
            channels: (0..c).map(|i| format!("ch{i}")).collect(),
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
        }
    }

    fn tiny_config(n_nodes: usize) -> ModelConfig {
        ModelConfig {
            num_nodes: n_nodes,
            layers: 1,
            hidden_dim: 8,
            embed_dim: 4,
            k_s: 2,
            k_t: 3,
            num_heads: 2,
            input_len: 6,
            horizon: 2,
            slots_per_day: 288,
            ..ModelConfig::default()
        }
    }

    struct Fixture {
        dataset: TrafficDataset,
        time: TimeFeatures,
        transitions: TransitionSet,
        windows: Vec<SampleWindow>,
    }

    impl Fixture {
        fn synthetic(n_nodes: usize, n_steps: usize, seed: u64) -> Self {
            let spec = SyntheticSpec {
                n_nodes,
                n_steps,
                seed,
                noise: 0.3,
                ..SyntheticSpec::default()
            };
            let (dataset, adj) = ar1_diffusion_dataset(&spec);
            let time = compute_time_features(&dataset).unwrap();
            let transitions = transition_matrices(&adj);
            let windows = make_windows(&dataset, 6, 2).unwrap();
            Self {
                dataset,
                time,
                transitions,
                windows,
            }
        }

        fn data(&self, n_train: usize, n_val: usize) -> TrainData<'_> {
            TrainData {
                dataset: &self.dataset,
                time: &self.time,
                transitions: &self.transitions,
                train_windows: &self.windows[..n_train],
                val_windows: &self.windows[n_train..n_train + n_val],
            }
        }
    }

    fn fitted_model(fx: &Fixture, cfg: &ModelConfig, seed: u64) -> Model {
        let scaler = crate::data::fit_scaler(&fx.dataset, &fx.windows).unwrap();
        Model::new(cfg.clone(), scaler, seed).unwrap()
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.max_epochs, 150);
        assert_eq!(cfg.patience, 15);
        assert_eq!(cfg.cl_growth_steps, 2000);
        assert_eq!(cfg.grad_clip, Some(5.0));
        assert!(cfg.mask_zeros);
        assert!(cfg.use_curriculum);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn grad_clip_round_trips_through_config_files() {
        let on = TrainConfig {
            grad_clip: Some(2.5),
            ..TrainConfig::default()
        };
        let off = TrainConfig {
            grad_clip: None,
            ..TrainConfig::default()
        };
        for cfg in [&on, &off] {
            let text = toml::to_string(cfg).unwrap();
            let back: TrainConfig = toml::from_str(&text).unwrap();
            assert_eq!(&back, cfg);
        }
        let parsed: TrainConfig = toml::from_str("grad_clip = 0.0").unwrap();
        assert_eq!(parsed.grad_clip, None);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = TrainConfig::default();
        let mut c = ok.clone();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.patience = 200;
        assert!(c.validate().unwrap_err().to_string().contains("patience"));
        let mut c = ok.clone();
        c.cl_growth_steps = 0;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.grad_clip = Some(-1.0);
        assert!(c.validate().is_err());
    }

    fn as3(values: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, values.len(), 1), values.to_vec()).unwrap()
    }

    #[test]
    fn mae_loss_hand_examples() {
        let y = as3(&[1.0, 2.0]);
        let p = as3(&[2.0, 4.0]);
        assert_eq!(mae_loss(p.view(), y.view(), 1, false), 1.5);

        let y = as3(&[0.0, 2.0]);
        let p = as3(&[1.0, 4.0]);
        assert_eq!(mae_loss(p.view(), y.view(), 1, true), 2.0);

        assert_eq!(mae_loss(y.view(), y.view(), 1, false), 0.0);

        let zeros = as3(&[0.0, 0.0]);
        let p = as3(&[3.0, 7.0]);
        assert_eq!(mae_loss(p.view(), zeros.view(), 1, true), 0.0);
    }

    #[test]
    fn mae_loss_truncates_to_the_horizon_level() {
        let y = Array3::from_shape_vec((2, 1, 1), vec![1.0, 1.0]).unwrap();
        let p = Array3::from_shape_vec((2, 1, 1), vec![2.0, 11.0]).unwrap();
        assert_eq!(mae_loss(p.view(), y.view(), 1, false), 1.0);
        assert_eq!(mae_loss(p.view(), y.view(), 2, false), 5.5);
    }

    #[test]
    fn curriculum_floor_arithmetic() {
        assert_eq!(curriculum_level(0, 1000, 12), 1);
        assert_eq!(curriculum_level(999, 1000, 12), 1);
        assert_eq!(curriculum_level(1000, 1000, 12), 2);
        assert_eq!(curriculum_level(2500, 1000, 12), 3);
        assert_eq!(curriculum_level(11 * 1000, 1000, 12), 12);
        assert_eq!(curriculum_level(1_000_000, 1000, 12), 12);
        let mut last = 0;
        for step in 0..5000 {
            let level = curriculum_level(step, 700, 12);
            assert!(level >= last, "level decreased at step {step}");
            last = level;
        }
    }

    #[test]
    fn early_stopping_hand_trace() {
        let mut es = EarlyStopping::new(2);
        for (val, stop) in [
            (5.0, false),
            (4.0, false),
            (4.5, false),
            (4.4, true),
            (4.6, true),
            (4.7, true),
        ] {
            es.observe(val);
            assert_eq!(es.should_stop(), stop, "after observing {val}");
        }
        assert_eq!(es.best(), 4.0);
    }

    #[test]
    fn early_stopping_edge_sequences() {
        let mut es = EarlyStopping::new(3);
        for val in [9.0, 8.0, 7.0, 6.0, 5.0] {
            assert!(es.observe(val));
            assert!(!es.should_stop());
        }
        let mut es = EarlyStopping::new(3);
        es.observe(1.0);
        for fed in 1..=3 {
            assert!(!es.observe(1.0));
            assert_eq!(es.should_stop(), fed == 3);
        }
    }

    #[test]
    fn tape_loss_matches_the_plain_oracle() {
        let fx = Fixture::synthetic(4, 60, 11);
        let cfg = tiny_config(4);
        let model = fitted_model(&fx, &cfg, 5);
        let w = &fx.windows[3];

        let x = apply_scaler(w.x(&fx.dataset), &model.scaler);
        let mut b = Bound::new(&model.store);
        let fwd = forward_on_tape(
            &mut b,
            &model.config,
            &model.params,
            x.view(),
            w.x_tod(&fx.time),
            w.x_dow(&fx.time),
            &fx.transitions,
            &model.scaler,
        )
        .unwrap();
        let y = w.y(&fx.dataset, 1);
        let (sum, count) = masked_abs_sum(&mut b, &fwd.y_hat, y, 2, false);
        let tape_loss = b.tape.value(sum)[[0, 0]] / count as f64;

        let y_hat = model
            .predict(x.view(), w.x_tod(&fx.time), w.x_dow(&fx.time), &fx.transitions)
            .unwrap();
        let plain = mae_loss(y_hat.view(), y, 2, false);
        assert!((tape_loss - plain).abs() < 1e-12, "{tape_loss} vs {plain}");
    }

    #[test]
    fn masked_cells_get_no_gradient() {
        let fx = Fixture::synthetic(4, 60, 3);
        let cfg = tiny_config(4);
        let model = fitted_model(&fx, &cfg, 9);
        let w = &fx.windows[0];

        // All-zero targets with masking on: the loss is constant zero, so
        // every parameter gradient the backward pass reports must be zero.
        let zeros = Array3::<f64>::zeros((2, 4, 1));
        let x = apply_scaler(w.x(&fx.dataset), &model.scaler);
        let mut b = Bound::new(&model.store);
        let fwd = forward_on_tape(
            &mut b,
            &model.config,
            &model.params,
            x.view(),
            w.x_tod(&fx.time),
            w.x_dow(&fx.time),
            &fx.transitions,
            &model.scaler,
        )
        .unwrap();
        let (sum, count) = masked_abs_sum(&mut b, &fwd.y_hat, zeros.view(), 2, true);
        assert_eq!(count, 0);
        assert_eq!(b.tape.value(sum)[[0, 0]], 0.0);
        let grads = b.tape.backward(sum);
        for g in b.param_grads(&grads).into_iter().flatten() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    fn quick_train_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            max_epochs: 4,
            patience: 4,
            use_curriculum: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_windows_drive_loss_toward_zero() {
        // Constant data: predicting the constant is the floor, and the
        // regression bias alone can reach it.
        let n = 3;
        let dataset = dataset_from_readings(Array3::from_elem((40, n, 1), 5.0));
        let time = compute_time_features(&dataset).unwrap();
        let mut adj = Array2::zeros((n, n));
        for i in 0..n {
            adj[[i, (i + 1) % n]] = 1.0;
        }
        let transitions = transition_matrices(&adj);
        let windows = make_windows(&dataset, 6, 2).unwrap();
        let data = TrainData {
            dataset: &dataset,
            time: &time,
            transitions: &transitions,
            train_windows: &windows[..16],
            val_windows: &windows[16..20],
        };
        let scaler = Scaler {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let mut model = Model::new(tiny_config(n), scaler, 17).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 16,
            max_epochs: 150,
            patience: 150,
            use_curriculum: false,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
        let first = report.state.step_losses[0];
        let last = *report.state.step_losses.last().unwrap();
        assert!(
            last < first * 0.2,
            "loss should collapse on constant data: {first} -> {last}"
        );
    }

    #[test]
    fn loss_decreases_on_synthetic_data() {
        let fx = Fixture::synthetic(6, 80, 21);
        let data = fx.data(32, 8);
        let mut model = fitted_model(&fx, &tiny_config(6), 1);
        let report = train(&mut model, &data, &quick_train_config(), |_| {}).unwrap();
        let first = report.log.first().unwrap().train_loss;
        let last = report.log.last().unwrap().train_loss;
        assert!(
            last < first,
            "mean epoch loss should drop: {first} -> {last}"
        );
        assert_eq!(report.log.len(), 4);
        assert!(report.log.iter().all(|e| e.val_mae.len() == 2));
        assert!(report.log.iter().all(|e| e.wall_clock_s >= 0.0));
    }

    #[test]
    fn training_changes_parameters_and_keeps_the_best_epoch() {
        let fx = Fixture::synthetic(4, 70, 2);
        let data = fx.data(24, 8);
        let mut model = fitted_model(&fx, &tiny_config(4), 3);
        let before = model.store.dump();
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            ..quick_train_config()
        };
        let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
        let after = model.store.dump();
        assert_ne!(before, after, "optimizer steps must move parameters");
        assert!(report.state.best_epoch >= 1);
        assert_eq!(report.best.params, after, "model ends at its best epoch");
        let logged_best = report
            .log
            .iter()
            .map(|e| e.val_mae_overall)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.state.best_val_mae, logged_best);
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_trajectory() {
        let fx = Fixture::synthetic(5, 70, 8);
        let run = || {
            let data = fx.data(24, 8);
            let mut model = fitted_model(&fx, &tiny_config(5), 7);
            let cfg = TrainConfig {
                max_epochs: 2,
                patience: 2,
                ..quick_train_config()
            };
            train(&mut model, &data, &cfg, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.state.step_losses, b.state.step_losses);
        assert_eq!(a.best.params, b.best.params);
    }

    #[test]
    fn all_masked_batches_are_skipped_and_stop_training_early() {
        // Every reading is zero, so with masking on no batch produces a
        // gradient, validation MAE stays at the defined 0, and early
        // stopping fires after exactly 1 + patience epochs.
        let n = 3;
        let dataset = dataset_from_readings(Array3::zeros((40, n, 1)));
        let time = compute_time_features(&dataset).unwrap();
        let mut adj = Array2::zeros((n, n));
        adj[[0, 1]] = 1.0;
        adj[[1, 2]] = 1.0;
        let transitions = transition_matrices(&adj);
        let windows = make_windows(&dataset, 6, 2).unwrap();
        let data = TrainData {
            dataset: &dataset,
            time: &time,
            transitions: &transitions,
            train_windows: &windows[..8],
            val_windows: &windows[8..12],
        };
        let scaler = Scaler {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let mut model = Model::new(tiny_config(n), scaler, 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 20,
            patience: 3,
            ..quick_train_config()
        };
        let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
        assert_eq!(report.state.global_step, 0);
        assert_eq!(report.log.len(), 4, "1 best epoch + patience stale ones");
        assert_eq!(report.state.all_masked_batches, 4);
        assert!(report.state.step_losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn non_finite_loss_reports_the_batch() {
        let fx = Fixture::synthetic(4, 60, 5);
        let data = fx.data(16, 8);
        // Unit scaler so the poisoned bias survives the on-tape inverse
        // scaling: every prediction is a finite ~1e308 and the forward
        // finiteness checks pass, but summing the absolute errors over the
        // batch overflows, which only the loss check can catch.
        let scaler = Scaler {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let mut model = Model::new(tiny_config(4), scaler, 2).unwrap();
        model.store.value_mut(model.params.reg2_b)[[0, 0]] = 1e308;
        let err = train(&mut model, &data, &quick_train_config(), |_| {}).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite training loss"), "{msg}");
        assert!(msg.contains("batch 0"), "{msg}");
    }

    #[test]
    fn empty_splits_are_rejected() {
        let fx = Fixture::synthetic(4, 60, 6);
        let mut model = fitted_model(&fx, &tiny_config(4), 2);
        let no_train = TrainData {
            dataset: &fx.dataset,
            time: &fx.time,
            transitions: &fx.transitions,
            train_windows: &[],
            val_windows: &fx.windows[..4],
        };
        assert!(train(&mut model, &no_train, &quick_train_config(), |_| {}).is_err());
        let no_val = TrainData {
            dataset: &fx.dataset,
            time: &fx.time,
            transitions: &fx.transitions,
            train_windows: &fx.windows[..4],
            val_windows: &[],
        };
        assert!(train(&mut model, &no_val, &quick_train_config(), |_| {}).is_err());
    }

    #[test]
    fn curriculum_truncation_shows_up_in_the_state() {
        let fx = Fixture::synthetic(4, 70, 9);
        let data = fx.data(24, 8);
        let mut model = fitted_model(&fx, &tiny_config(4), 6);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            max_epochs: 2,
            patience: 2,
            cl_growth_steps: 2,
            use_curriculum: true,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
        // 6 steps with an increment every 2 caps at the 2-step horizon.
        assert_eq!(report.state.global_step, 6);
        assert_eq!(report.state.current_horizon_level, 2);
    }

    #[test]
    fn validation_covers_every_horizon() {
        let fx = Fixture::synthetic(4, 60, 13);
        let data = fx.data(16, 8);
        let model = fitted_model(&fx, &tiny_config(4), 5);
        let (per_horizon, overall) =
            validation_mae(&model, &data, data.val_windows, true).unwrap();
        assert_eq!(per_horizon.len(), 2);
        assert!(per_horizon.iter().all(|&m| m.is_finite() && m >= 0.0));
        let lo = per_horizon.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per_horizon.iter().cloned().fold(0.0, f64::max);
        assert!(overall >= lo && overall <= hi);
    }

    #[test]
    fn mask_toggle_changes_the_loss_when_zeros_are_present() {
        let spec = SyntheticSpec {
            n_nodes: 4,
            n_steps: 60,
            seed: 31,
            noise: 0.3,
            zero_fraction: 0.2,
            ..SyntheticSpec::default()
        };
        let (dataset, _) = ar1_diffusion_dataset(&spec);
        let windows = make_windows(&dataset, 6, 2).unwrap();
        let w = &windows[0];
        let y = w.y(&dataset, 1);
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0, "fixture should contain masked readings");
        let y_hat: Array3<f64> = &y.to_owned() + 1.0;
        let masked = mae_loss(y_hat.view(), y, 2, true);
        let unmasked = mae_loss(y_hat.view(), y, 2, false);
        assert_eq!(masked, 1.0);
        assert_eq!(unmasked, 1.0);
        // Shift only the masked cells' predictions: the masked loss cannot
        // see the difference, the unmasked one must.
        let mut y_hat = y_hat;
        for (p, t) in y_hat.iter_mut().zip(y.iter()) {
            if *t == 0.0 {
                *p += 10.0;
            }
        }
        assert_eq!(mae_loss(y_hat.view(), y, 2, true), 1.0);
        assert!(mae_loss(y_hat.view(), y, 2, false) > 1.0);
        let _: ArrayView3<'_, f64> = y;
    }
}

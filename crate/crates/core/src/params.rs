//! Trainable parameter storage, initialization and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] and are addressed by [`ParamId`]
//! handles. A [`Bound`] wraps one `Tape` and lazily registers each parameter
//! the forward pass touches, so a parameter appears on the tape exactly once
//! per pass no matter how many modules use it.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Array2<f64>,
}

/// Owns every trainable tensor of a model, in registration order.
///
/// Registration order is part of the model's identity: it fixes both the
/// random-init stream and the optimizer's update order, which keeps runs
/// bit-for-bit reproducible for a given seed.
#[derive(Default, Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor drawn uniformly from `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
        self.insert(name.into(), value)
    }

    /// Registers a weight matrix for `x @ w`; fan-in is the input width.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        self.add_uniform(name, rows, cols, rows, rng)
    }

    /// Registers an embedding table; fan-in is the embedding width.
    pub fn add_embedding(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        self.add_uniform(name, rows, cols, cols, rng)
    }

    /// Registers a zero-initialized `1 x d` bias row.
    pub fn add_bias(&mut self, name: impl Into<String>, cols: usize) -> ParamId {
        self.insert(name.into(), Array2::zeros((1, cols)))
    }

    pub fn insert(&mut self, name: String, value: Array2<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Overwrites every entry with zeros. Useful for probing architectural
    /// zero-propagation properties.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.fill(0.0);
        }
    }

    /// Serializes all parameters by name for checkpointing.
    pub fn dump(&self) -> BTreeMap<String, ParamDump> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    ParamDump {
                        rows: e.value.nrows(),
                        cols: e.value.ncols(),
                        data: e.value.iter().cloned().collect(),
                    },
                )
            })
            .collect()
    }

    /// Restores parameter values from a checkpoint dump.
    ///
    /// Every registered parameter must be present with matching shape, and
    /// the dump must not contain unknown names.
    pub fn load(&mut self, dump: &BTreeMap<String, ParamDump>) -> Result<()> {
        for name in dump.keys() {
            if !self.by_name.contains_key(name) {
                return Err(Error::Checkpoint(format!("unknown parameter {name}")));
            }
        }
        for e in &mut self.entries {
            let d = dump
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if d.rows != e.value.nrows() || d.cols != e.value.ncols() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {}x{}, checkpoint has {}x{}",
                    e.name,
                    e.value.nrows(),
                    e.value.ncols(),
                    d.rows,
                    d.cols
                )));
            }
            if d.data.len() != d.rows * d.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has {} values for shape {}x{}",
                    e.name,
                    d.data.len(),
                    d.rows,
                    d.cols
                )));
            }
            e.value = Array2::from_shape_vec((d.rows, d.cols), d.data.clone())
                .expect("length checked above");
        }
        Ok(())
    }
}

/// One parameter tensor in checkpoint form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A `Tape` bound to a `ParamStore` for one forward pass.
pub struct Bound<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// The tape variable for a parameter, registering it on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Records a constant (non-trainable) matrix.
    pub fn cst(&mut self, value: Array2<f64>) -> Var {
        self.tape.constant(value)
    }

    /// Per-parameter gradients in store order; `None` for parameters the
    /// pass never touched or that received no gradient.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Array2<f64>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Adam optimizer with bias-corrected first and second moments.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let m = store
            .ids()
            .map(|id| Array2::zeros(store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must align with the store's registration
    /// order; parameters are updated in that order, deterministically.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.value_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, m, v| {
                    let mhat = m / b1t;
                    let vhat = v / b2t;
                    *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                });
        }
    }
}

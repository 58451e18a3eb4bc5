//! Fixtures shared by the criterion benches: a mid-sized model, a ring
//! road network and one synthetic input window.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dstf_core::autodiff::Var;
use dstf_core::data::Scaler;
use dstf_core::graph::{transition_matrices, TransitionSet};
use dstf_core::model::{forward_on_tape, Model, ModelConfig};
use dstf_core::params::Bound;

/// Paper-shaped hyperparameters over `n` nodes, kept at two layers so one
/// bench iteration stays in the millisecond range.
pub fn bench_config(n: usize) -> ModelConfig {
    ModelConfig {
        num_nodes: n,
        layers: 2,
        hidden_dim: 32,
        embed_dim: 10,
        ..ModelConfig::default()
    }
}

pub fn bench_model(n: usize) -> Model {
    let scaler = Scaler {
        mean: vec![0.0],
        std: vec![1.0],
    };
    Model::new(bench_config(n), scaler, 7).expect("bench config is valid")
}

/// Directed ring with a skip link every fourth node, row-normalized.
pub fn ring_transitions(n: usize) -> TransitionSet {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[[i, (i + 1) % n]] = 1.0;
        a[[(i + 1) % n, i]] = 0.6;
        if i % 4 == 0 {
            a[[i, (i + n / 2) % n]] = 0.3;
        }
    }
    transition_matrices(&a)
}

/// One scaled window plus targets and time indices, all deterministic.
pub fn synthetic_window(
    cfg: &ModelConfig,
    seed: u64,
) -> (Array3<f64>, Array3<f64>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array3::from_shape_fn((cfg.input_len, cfg.num_nodes, cfg.in_channels), |_| {
        rng.gen_range(-1.0..1.0)
    });
    let y = Array3::from_shape_fn((cfg.horizon, cfg.num_nodes, cfg.out_channels), |_| {
        rng.gen_range(30.0..70.0)
    });
    let tod: Vec<usize> = (0..cfg.input_len).map(|t| (100 + t) % cfg.slots_per_day).collect();
    let dow: Vec<usize> = (0..cfg.input_len).map(|t| (2 + t / cfg.slots_per_day) % 7).collect();
    (x, y, tod, dow)
}

/// Forward pass plus a mean-absolute-error backward sweep; returns the loss
/// so the caller can keep the optimizer out of the measurement.
pub fn forward_backward(
    model: &Model,
    transitions: &TransitionSet,
    x: &Array3<f64>,
    y: &Array3<f64>,
    tod: &[usize],
    dow: &[usize],
) -> f64 {
    let mut b = Bound::new(&model.store);
    let fwd = forward_on_tape(
        &mut b,
        &model.config,
        &model.params,
        x.view(),
        tod,
        dow,
        transitions,
        &model.scaler,
    )
    .expect("bench forward");
    let sums: Vec<Var> = fwd
        .y_hat
        .iter()
        .zip(y.outer_iter())
        .map(|(&pred, target)| {
            let target = b.cst(target.to_owned());
            let diff = b.tape.sub(pred, target);
            let abs = b.tape.abs(diff);
            b.tape.sum_all(abs)
        })
        .collect();
    let total = b.tape.add_n(&sums);
    let count = (model.config.horizon * model.config.num_nodes * model.config.out_channels) as f64;
    let loss = b.tape.scale(total, 1.0 / count);
    let grads = b.tape.backward(loss);
    debug_assert!(b.param_grads(&grads).iter().any(Option::is_some));
    b.tape.value(loss)[[0, 0]]
}

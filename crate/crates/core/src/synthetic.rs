//! Synthetic traffic datasets for tests, examples and benchmarks.

use chrono::NaiveDateTime;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TrafficDataset;
use crate::graph::{transition_matrices, TransitionSet};

/// Knobs for [`ar1_diffusion_dataset`].
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    /// Fraction of readings zeroed out to imitate sensor dropout.
    pub zero_fraction: f64,
    pub interval_minutes: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            n_steps: 2048,
            seed: 7,
            noise: 0.5,
            zero_fraction: 0.0,
            interval_minutes: 5,
        }
    }
}

/// Generates a speed-like dataset where each node follows an AR(1) process
/// around a daily sinusoid and additionally absorbs signal diffusing in from
/// its graph neighbors — the same structure the model assumes. Returns the
/// dataset together with the (ring + chords) adjacency that generated it.
pub fn ar1_diffusion_dataset(spec: &SyntheticSpec) -> (TrafficDataset, Array2<f64>) {
    let n = spec.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Ring so the graph is always connected, plus a few random chords.
    let mut adj = Array2::zeros((n, n));
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            adj[[i, j]] = 1.0;
            adj[[j, i]] = 1.0;
        }
    }
    let extra = n / 2;
    for _ in 0..extra {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j {
            let w = rng.gen_range(0.3..1.0);
            adj[[i, j]] = w;
            adj[[j, i]] = w;
        }
    }
    let TransitionSet { forward, .. } = transition_matrices(&adj);

    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(45.0..70.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let slots_per_day = (1440 / spec.interval_minutes) as f64;
    let ar = 0.7;
    let diffuse = 0.25;

    let mut readings = Array3::zeros((spec.n_steps, n, 1));
    let mut state: Vec<f64> = base.clone();
    for t in 0..spec.n_steps {
        let day_angle = std::f64::consts::TAU * (t as f64 % slots_per_day) / slots_per_day;
        let mut next = vec![0.0; n];
        for i in 0..n {
            let daily = 6.0 * (day_angle + phase[i]).sin();
            let inflow: f64 = (0..n).map(|j| forward[[i, j]] * (state[j] - base[j])).sum();
            next[i] = base[i]
                + daily
                + ar * (state[i] - base[i] - daily)
                + diffuse * inflow
                + spec.noise * rng.gen_range(-1.0..1.0);
            // Speeds stay physical.
            next[i] = next[i].clamp(1.0, 90.0);
        }
        for i in 0..n {
            let dropped = spec.zero_fraction > 0.0 && rng.gen_bool(spec.zero_fraction);
            readings[[t, i, 0]] = if dropped { 0.0 } else { next[i] };
        }
        state = next;
    }

    let start = NaiveDateTime::parse_from_str("2012-03-05T00:00:00", "%Y-%m-%dT%H:%M:%S")
        .expect("literal timestamp");
    let timestamps = (0..spec.n_steps)
        .map(|i| start + chrono::Duration::minutes(spec.interval_minutes as i64 * i as i64))
        .collect();
    let ds = TrafficDataset {
        readings,
        timestamps,
        interval_minutes: spec.interval_minutes,
        channels: vec!["speed".to_string()],
        node_ids: (0..n).map(|i| i.to_string()).collect(),
    };
    debug_assert!(ds.validate().is_ok());
    (ds, adj)
}

//! Full model assembly: input projection, estimation gate, decoupled layer
//! stack, forecast aggregation and the regression head, plus checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, Var};
use crate::data::Scaler;
use crate::diffusion::{
    diffusion_block, masked_transition_powers, register_diffusion, BlockOutput, DiffusionIds,
};
use crate::dynamic_graph::{
    build_dynamic_features, dynamic_transitions, register_dyn_graph, register_embeddings,
    self_adaptive_transition, DynGraphIds, EmbeddingIds,
};
use crate::graph::TransitionSet;
use crate::inherent::{inherent_block, register_inherent, GruUpdate, InherentFlags, InherentIds};
use crate::params::{Bound, ParamDump, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrder {
    #[default]
    DiffusionFirst,
    InherentFirst,
}

/// Model hyperparameters and ablation switches. Every field has a default
/// except `num_nodes`, which must match the dataset and therefore defaults to
/// an invalid 0 that `validate` rejects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub num_heads: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub slots_per_day: usize,
    pub use_gate: bool,
    pub use_residual: bool,
    pub use_dynamic_graph: bool,
    pub use_adaptive: bool,
    pub use_gru: bool,
    pub use_attention: bool,
    pub autoregressive: bool,
    pub block_order: BlockOrder,
    pub gru_update: GruUpdate,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_nodes: 0,
            layers: 4,
            hidden_dim: 32,
            embed_dim: 12,
            k_s: 2,
            k_t: 3,
            num_heads: 4,
            input_len: 12,
            horizon: 12,
            in_channels: 1,
            out_channels: 1,
            slots_per_day: 288,
            use_gate: true,
            use_residual: true,
            use_dynamic_graph: true,
            use_adaptive: true,
            use_gru: true,
            use_attention: true,
            autoregressive: true,
            block_order: BlockOrder::default(),
            gru_update: GruUpdate::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_nodes", self.num_nodes),
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("k_s", self.k_s),
            ("k_t", self.k_t),
            ("num_heads", self.num_heads),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("slots_per_day", self.slots_per_day),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.input_len < self.k_t {
            return Err(Error::config(format!(
                "input_len = {} is shorter than the temporal kernel k_t = {}",
                self.input_len, self.k_t
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::config(format!(
                "hidden_dim = {} must be even for the sinusoidal positional encoding",
                self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Estimation gate weights: the concatenated embedding row passes through
/// `W1` (ReLU) then `W2` (sigmoid). No biases, matching the gate equation.
#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub gate: GateIds,
    pub dif: DiffusionIds,
    pub inh: InherentIds,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub emb: EmbeddingIds,
    pub dyn_graph: DynGraphIds,
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub reg1_w: ParamId,
    pub reg1_b: ParamId,
    pub reg2_w: ParamId,
    pub reg2_b: ParamId,
}

/// Registers every parameter in a fixed order so a seed fully determines the
/// initialization stream. Ablated components register too — flags only
/// change the forward wiring, keeping checkpoints interchangeable.
pub fn register_model(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> ModelParams {
    let d = cfg.hidden_dim;
    let emb = register_embeddings(store, cfg.num_nodes, cfg.embed_dim, cfg.slots_per_day, rng);
    let dyn_graph = register_dyn_graph(store, cfg.input_len, d, cfg.embed_dim, rng);
    let input_w = store.add_weight("input.w", cfg.in_channels, d, rng);
    let input_b = store.add_bias("input.b", d);
    let layers = (0..cfg.layers)
        .map(|l| LayerIds {
            gate: GateIds {
                w1: store.add_weight(format!("layer{l}.gate.w1"), 4 * cfg.embed_dim, cfg.embed_dim, rng),
                w2: store.add_weight(format!("layer{l}.gate.w2"), cfg.embed_dim, 1, rng),
            },
            dif: register_diffusion(store, l, d, cfg.k_s, cfg.k_t, cfg.horizon, rng),
            inh: register_inherent(store, l, d, cfg.num_heads, cfg.horizon, rng),
        })
        .collect();
    ModelParams {
        emb,
        dyn_graph,
        input_w,
        input_b,
        layers,
        reg1_w: store.add_weight("head.fc1.w", d, d, rng),
        reg1_b: store.add_bias("head.fc1.b", d),
        reg2_w: store.add_weight("head.fc2.w", d, cfg.out_channels, rng),
        reg2_b: store.add_bias("head.fc2.b", cfg.out_channels),
    }
}

/// Per-step gate columns `Λ_t ∈ (0,1)^{N×1}`:
/// `Sigmoid(ReLU([T_D[tod_t] ∥ T_W[dow_t] ∥ E_u ∥ E_d] W1) W2)`.
pub fn estimation_gate(
    b: &mut Bound,
    gate: &GateIds,
    emb: &EmbeddingIds,
    tod: &[usize],
    dow: &[usize],
    n: usize,
) -> Vec<Var> {
    let w1 = b.var(gate.w1);
    let w2 = b.var(gate.w2);
    let t_d = b.var(emb.t_d);
    let t_w = b.var(emb.t_w);
    let e_u = b.var(emb.e_u);
    let e_d = b.var(emb.e_d);
    tod.iter()
        .zip(dow)
        .map(|(&tod_t, &dow_t)| {
            let td_row = b.tape.select_row(t_d, tod_t);
            let td_full = b.tape.broadcast_row(td_row, n);
            let tw_row = b.tape.select_row(t_w, dow_t);
            let tw_full = b.tape.broadcast_row(tw_row, n);
            let cat = b.tape.concat_cols(&[td_full, tw_full, e_u, e_d]);
            let h = b.tape.matmul(cat, w1);
            let h = b.tape.relu(h);
            let s = b.tape.matmul(h, w2);
            b.tape.sigmoid(s)
        })
        .collect()
}

/// Projects raw per-step readings (`N × C`, scaled units) into the latent
/// width `d`.
pub fn input_projection(b: &mut Bound, x: &Array2<f64>, w: Var, bias: Var) -> Var {
    let xv = b.cst(x.clone());
    affine(&mut b.tape, xv, w, bias)
}

/// Everything one layer produced, kept as tape handles so tests (and the
/// decomposition bookkeeping check) can read intermediate values.
pub struct LayerVars {
    pub gate: Option<Vec<Var>>,
    pub dif: BlockOutput,
    pub inh: BlockOutput,
    pub x_next: Vec<Var>,
}

pub struct ForwardVars {
    /// Per future step: `N × C_out` predictions in original units.
    pub y_hat: Vec<Var>,
    pub layers: Vec<LayerVars>,
    /// The final residual `X^L` — discarded by the loss but needed by the
    /// decomposition identity.
    pub x_final: Vec<Var>,
}

fn check_finite(b: &Bound, vars: &[Var], layer: usize, block: &'static str) -> Result<()> {
    for &v in vars {
        if !b.tape.value(v).iter().all(|x| x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite values in layer {layer}, {block} block"
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    b: &mut Bound,
    cfg: &ModelConfig,
    layer_idx: usize,
    ids: &LayerIds,
    emb: &EmbeddingIds,
    masks: &[Vec<Var>],
    x_l: &[Var],
    tod: &[usize],
    dow: &[usize],
) -> Result<LayerVars> {
    let n = cfg.num_nodes;
    let gate = if cfg.use_gate {
        Some(estimation_gate(b, &ids.gate, emb, tod, dow, n))
    } else {
        None
    };
    let apply_gate = |b: &mut Bound, gate: &Option<Vec<Var>>, xs: &[Var]| -> Vec<Var> {
        match gate {
            Some(cols) => xs
                .iter()
                .zip(cols)
                .map(|(&x, &g)| b.tape.mul_col_broadcast(x, g))
                .collect(),
            None => xs.to_vec(),
        }
    };
    let subtract = |b: &mut Bound, xs: &[Var], backcast: &[Var]| -> Vec<Var> {
        xs.iter()
            .zip(backcast)
            .map(|(&x, &bc)| b.tape.sub(x, bc))
            .collect()
    };

    let conv_w: Vec<Vec<ParamId>> = if cfg.use_adaptive {
        ids.dif.conv_w.clone()
    } else {
        ids.dif.conv_w[..2].to_vec()
    };
    let inh_flags = InherentFlags {
        use_gru: cfg.use_gru,
        use_attention: cfg.use_attention,
        update: cfg.gru_update,
    };

    let run_dif = |b: &mut Bound, input: &[Var]| -> Result<BlockOutput> {
        let out = diffusion_block(
            b,
            &ids.dif,
            masks,
            &conv_w,
            input,
            cfg.horizon,
            cfg.autoregressive,
        )?;
        check_finite(b, &out.hidden, layer_idx, "diffusion")?;
        check_finite(b, &out.forecast, layer_idx, "diffusion")?;
        Ok(out)
    };
    let run_inh = |b: &mut Bound, input: &[Var]| -> Result<BlockOutput> {
        let out = inherent_block(b, &ids.inh, input, cfg.horizon, inh_flags, cfg.autoregressive);
        check_finite(b, &out.hidden, layer_idx, "inherent")?;
        check_finite(b, &out.forecast, layer_idx, "inherent")?;
        Ok(out)
    };

    // The gate scales only the first block's input; the residual bookkeeping
    // subtracts backcasts from the ungated signal so the layer telescopes.
    let (dif, inh, x_next) = match cfg.block_order {
        BlockOrder::DiffusionFirst => {
            let first_in = apply_gate(b, &gate, x_l);
            let dif = run_dif(b, &first_in)?;
            let x_mid = if cfg.use_residual {
                subtract(b, x_l, &dif.backcast)
            } else {
                x_l.to_vec()
            };
            let inh = run_inh(b, &x_mid)?;
            let x_next = if cfg.use_residual {
                subtract(b, &x_mid, &inh.backcast)
            } else {
                x_l.to_vec()
            };
            (dif, inh, x_next)
        }
        BlockOrder::InherentFirst => {
            let first_in = apply_gate(b, &gate, x_l);
            let inh = run_inh(b, &first_in)?;
            let x_mid = if cfg.use_residual {
                subtract(b, x_l, &inh.backcast)
            } else {
                x_l.to_vec()
            };
            let dif = run_dif(b, &x_mid)?;
            let x_next = if cfg.use_residual {
                subtract(b, &x_mid, &dif.backcast)
            } else {
                x_l.to_vec()
            };
            (dif, inh, x_next)
        }
    };

    Ok(LayerVars {
        gate,
        dif,
        inh,
        x_next,
    })
}

/// Runs the whole model on one window, leaving the graph on the tape so the
/// caller can attach a loss. `x_scaled` is `T_h × N × C` in scaled units;
/// `tod`/`dow` are the window's per-step time indices; predictions come back
/// in original units (the scaler inversion is part of the graph).
pub fn forward_on_tape(
    b: &mut Bound,
    cfg: &ModelConfig,
    params: &ModelParams,
    x_scaled: ArrayView3<'_, f64>,
    tod: &[usize],
    dow: &[usize],
    transitions: &TransitionSet,
    scaler: &Scaler,
) -> Result<ForwardVars> {
    let t_h = cfg.input_len;
    let n = cfg.num_nodes;
    if x_scaled.dim() != (t_h, n, cfg.in_channels) {
        return Err(Error::shape(format!(
            "window shape {:?} does not match config ({t_h}, {n}, {})",
            x_scaled.dim(),
            cfg.in_channels
        )));
    }
    if tod.len() != t_h || dow.len() != t_h {
        return Err(Error::shape(format!(
            "need {t_h} time indices, got {} tod / {} dow",
            tod.len(),
            dow.len()
        )));
    }

    let input_w = b.var(params.input_w);
    let input_b = b.var(params.input_b);
    let x_latent: Vec<Var> = x_scaled
        .axis_iter(Axis(0))
        .map(|step| input_projection(b, &step.to_owned(), input_w, input_b))
        .collect();
    check_finite(b, &x_latent, 0, "input projection")?;

    // Transitions are window-level: built once here, shared by every layer.
    let anchor = t_h - 1;
    let (p_dy_f, p_dy_b) = if cfg.use_dynamic_graph {
        let p_f = b.cst(transitions.forward.clone());
        let p_b = b.cst(transitions.backward.clone());
        let (df_u, df_d) = build_dynamic_features(
            b,
            &params.dyn_graph,
            &params.emb,
            &x_latent,
            tod[anchor],
            dow[anchor],
        );
        dynamic_transitions(b, &params.dyn_graph, df_u, df_d, p_f, p_b, cfg.hidden_dim)
    } else {
        (
            b.cst(transitions.forward.clone()),
            b.cst(transitions.backward.clone()),
        )
    };
    let mut masks = vec![
        masked_transition_powers(b, p_dy_f, cfg.k_s),
        masked_transition_powers(b, p_dy_b, cfg.k_s),
    ];
    if cfg.use_adaptive {
        let p_apt = self_adaptive_transition(b, &params.emb);
        masks.push(masked_transition_powers(b, p_apt, cfg.k_s));
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut x = x_latent;
    for (l, ids) in params.layers.iter().enumerate() {
        let trace = layer_forward(b, cfg, l, ids, &params.emb, &masks, &x, tod, dow)?;
        x = trace.x_next.clone();
        layers.push(trace);
    }

    // Forecast aggregation: per future step, sum the forecast hidden states
    // of both blocks across all layers, then regress d -> d -> C_out.
    let reg1_w = b.var(params.reg1_w);
    let reg1_b = b.var(params.reg1_b);
    let reg2_w = b.var(params.reg2_w);
    let reg2_b = b.var(params.reg2_b);
    let std_mat = Array2::from_shape_fn((n, cfg.out_channels), |(_, c)| scaler.std[c]);
    let mean_row = Array2::from_shape_fn((1, cfg.out_channels), |(_, c)| scaler.mean[c]);

    let mut y_hat = Vec::with_capacity(cfg.horizon);
    for j in 0..cfg.horizon {
        let parts: Vec<Var> = layers
            .iter()
            .flat_map(|t| [t.dif.forecast[j], t.inh.forecast[j]])
            .collect();
        let h = b.tape.add_n(&parts);
        let r1 = affine(&mut b.tape, h, reg1_w, reg1_b);
        let r1 = b.tape.relu(r1);
        let out = affine(&mut b.tape, r1, reg2_w, reg2_b);
        let std_c = b.cst(std_mat.clone());
        let mean_c = b.cst(mean_row.clone());
        let scaled = b.tape.mul(out, std_c);
        y_hat.push(b.tape.add_bias(scaled, mean_c));
    }
    check_finite(b, &y_hat, cfg.layers, "regression")?;

    Ok(ForwardVars {
        y_hat,
        layers,
        x_final: x,
    })
}

/// A trained (or freshly initialized) model: parameters plus everything
/// needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub scaler: Scaler,
    pub seed: u64,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, scaler: Scaler, seed: u64) -> Result<Self> {
        config.validate()?;
        if scaler.mean.len() < config.out_channels {
            return Err(Error::config(format!(
                "scaler covers {} channels, model outputs {}",
                scaler.mean.len(),
                config.out_channels
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = register_model(&mut store, &config, &mut rng);
        Ok(Self {
            config,
            scaler,
            seed,
            store,
            params,
        })
    }

    /// Convenience forward pass: runs the graph and extracts the prediction
    /// as a `T_f × N × C_out` array in original units.
    pub fn predict(
        &self,
        x_scaled: ArrayView3<'_, f64>,
        tod: &[usize],
        dow: &[usize],
        transitions: &TransitionSet,
    ) -> Result<Array3<f64>> {
        let mut b = Bound::new(&self.store);
        let fwd = forward_on_tape(
            &mut b,
            &self.config,
            &self.params,
            x_scaled,
            tod,
            dow,
            transitions,
            &self.scaler,
        )?;
        let mut out = Array3::zeros((self.config.horizon, self.config.num_nodes, self.config.out_channels));
        for (j, &v) in fwd.y_hat.iter().enumerate() {
            out.index_axis_mut(Axis(0), j).assign(b.tape.value(v));
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            seed: self.seed,
            params: self.store.dump(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(cp.config.clone(), cp.scaler.clone(), cp.seed)?;
        model.store.load(&cp.params)?;
        Ok(model)
    }
}

/// Serialized model state. JSON keeps the full f64 precision of every
/// parameter (round-trips are bit-exact).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub scaler: Scaler,
    pub seed: u64,
    pub params: BTreeMap<String, ParamDump>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_nodes: 4,
            layers: 2,
            hidden_dim: 4,
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

    fn unit_scaler(channels: usize) -> Scaler {
        Scaler {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn ring_transitions(n: usize) -> TransitionSet {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            a[[i, (i + 1) % n]] = 1.0;
            a[[i, (i + n - 1) % n]] = 0.5;
        }
        crate::graph::transition_matrices(&a)
    }

    fn random_window(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Array3<f64> {
        Array3::from_shape_fn(
            (cfg.input_len, cfg.num_nodes, cfg.in_channels),
            |_| rng.gen_range(-1.5..1.5),
        )
    }

    fn time_indices(cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
        let tod: Vec<usize> = (0..cfg.input_len).map(|t| (10 + t) % cfg.slots_per_day).collect();
        let dow = vec![2usize; cfg.input_len];
        (tod, dow)
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.hidden_dim, 32);
        assert_eq!(cfg.embed_dim, 12);
        assert_eq!(cfg.k_s, 2);
        assert_eq!(cfg.k_t, 3);
        assert_eq!(cfg.num_heads, 4);
        assert_eq!(cfg.input_len, 12);
        assert_eq!(cfg.horizon, 12);
        assert_eq!(cfg.slots_per_day, 288);
        assert!(cfg.use_gate && cfg.use_residual && cfg.use_dynamic_graph);
        assert!(cfg.use_adaptive && cfg.use_gru && cfg.use_attention);
        assert!(cfg.autoregressive);
        assert_eq!(cfg.block_order, BlockOrder::DiffusionFirst);
        assert_eq!(cfg.gru_update, GruUpdate::Standard);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = tiny_config();
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.num_nodes = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.layers = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.input_len = 2; // below k_t = 3
        assert!(c.validate().unwrap_err().to_string().contains("k_t"));
        let mut c = ok;
        c.hidden_dim = 5;
        assert!(c.validate().unwrap_err().to_string().contains("even"));
    }

    #[test]
    fn config_toml_round_trip_with_partial_keys() {
        let toml_text = "num_nodes = 7\nlayers = 2\nblock_order = \"inherent-first\"\ngru_update = \"literal\"\n";
        let cfg: ModelConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.num_nodes, 7);
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.hidden_dim, 32);
        assert_eq!(cfg.block_order, BlockOrder::InherentFirst);
        assert_eq!(cfg.gru_update, GruUpdate::Literal);
    }

    #[test]
    fn zero_parameter_gate_is_exactly_half() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone(), unit_scaler(1), 3).unwrap();
        model.store.zero_all();
        let (tod, dow) = time_indices(&cfg);
        let mut b = Bound::new(&model.store);
        let gate = estimation_gate(
            &mut b,
            &model.params.layers[0].gate,
            &model.params.emb,
            &tod,
            &dow,
            cfg.num_nodes,
        );
        for g in gate {
            assert!(b.tape.value(g).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn gate_is_node_constant_when_embeddings_are() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone(), unit_scaler(1), 4).unwrap();
        // Make every node's embedding rows identical.
        for id in [model.params.emb.e_u, model.params.emb.e_d] {
            let table = model.store.value_mut(id);
            let first = table.row(0).to_owned();
            for mut row in table.rows_mut() {
                row.assign(&first);
            }
        }
        let (tod, dow) = time_indices(&cfg);
        let mut b = Bound::new(&model.store);
        let gate = estimation_gate(
            &mut b,
            &model.params.layers[0].gate,
            &model.params.emb,
            &tod,
            &dow,
            cfg.num_nodes,
        );
        for g in gate {
            let col = b.tape.value(g);
            for i in 1..cfg.num_nodes {
                assert_eq!(col[[i, 0]], col[[0, 0]]);
            }
            assert!(col[[0, 0]] > 0.0 && col[[0, 0]] < 1.0);
        }
    }

    #[test]
    fn gate_cell_matches_scalar_oracle() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), unit_scaler(1), 5).unwrap();
        let (tod, dow) = time_indices(&cfg);
        let mut b = Bound::new(&model.store);
        let gate = estimation_gate(
            &mut b,
            &model.params.layers[0].gate,
            &model.params.emb,
            &tod,
            &dow,
            cfg.num_nodes,
        );

        let (t, i) = (2usize, 1usize);
        let d_e = cfg.embed_dim;
        let td = model.store.value(model.params.emb.t_d);
        let tw = model.store.value(model.params.emb.t_w);
        let eu = model.store.value(model.params.emb.e_u);
        let ed = model.store.value(model.params.emb.e_d);
        let mut cat = Vec::with_capacity(4 * d_e);
        cat.extend((0..d_e).map(|k| td[[tod[t], k]]));
        cat.extend((0..d_e).map(|k| tw[[dow[t], k]]));
        cat.extend((0..d_e).map(|k| eu[[i, k]]));
        cat.extend((0..d_e).map(|k| ed[[i, k]]));
        let w1 = model.store.value(model.params.layers[0].gate.w1);
        let w2 = model.store.value(model.params.layers[0].gate.w2);
        let hidden: Vec<f64> = (0..d_e)
            .map(|j| {
                let s: f64 = cat.iter().enumerate().map(|(k, &v)| v * w1[[k, j]]).sum();
                s.max(0.0)
            })
            .collect();
        let score: f64 = hidden.iter().enumerate().map(|(j, &h)| h * w2[[j, 0]]).sum();
        let want = 1.0 / (1.0 + (-score).exp());
        let got = b.tape.value(gate[t])[[i, 0]];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn input_projection_examples() {
        let mut store = ParamStore::new();
        let w = store.insert("w".into(), arr2(&[[1.0, 0.0]]));
        let bias = store.add_bias("b", 2);
        let mut b = Bound::new(&store);
        let wv = b.var(w);
        let bv = b.var(bias);
        let x = arr2(&[[3.0], [-2.0]]);
        let latent = input_projection(&mut b, &x, wv, bv);
        assert_eq!(b.tape.value(latent), &arr2(&[[3.0, 0.0], [-2.0, 0.0]]));

        let zero = input_projection(&mut b, &Array2::zeros((2, 1)), wv, bv);
        assert!(b.tape.value(zero).iter().all(|&v| v == 0.0));

        // Random 1 -> 3 affine against a scalar oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store2 = ParamStore::new();
        let w2 = store2.add_weight("w", 1, 3, &mut rng);
        let b2 = store2.add_bias("b", 3);
        store2
            .value_mut(b2)
            .assign(&arr2(&[[0.1, -0.2, 0.3]]));
        let mut bound = Bound::new(&store2);
        let w2v = bound.var(w2);
        let b2v = bound.var(b2);
        let x = arr2(&[[2.0], [-1.0]]);
        let out = input_projection(&mut bound, &x, w2v, b2v);
        let wvals = store2.value(w2).clone();
        let bvals = store2.value(b2).clone();
        for i in 0..2 {
            for j in 0..3 {
                let want = x[[i, 0]] * wvals[[0, j]] + bvals[[0, j]];
                assert!((bound.tape.value(out)[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    fn run_forward(model: &Model, seed: u64) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        // Returns (y_hat, x0, sum of backcasts per step, x_final) values.
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_window(&mut rng, cfg);
        let (tod, dow) = time_indices(cfg);
        let trans = ring_transitions(cfg.num_nodes);
        let mut b = Bound::new(&model.store);
        let fwd = forward_on_tape(
            &mut b,
            cfg,
            &model.params,
            x.view(),
            &tod,
            &dow,
            &trans,
            &model.scaler,
        )
        .unwrap();

        let input_w = model.store.value(model.params.input_w);
        let input_b = model.store.value(model.params.input_b);
        let x0: Vec<Array2<f64>> = (0..cfg.input_len)
            .map(|t| {
                let step = x.index_axis(Axis(0), t).to_owned();
                step.dot(input_w) + input_b
            })
            .collect();

        let mut back_sum = vec![Array2::<f64>::zeros((cfg.num_nodes, cfg.hidden_dim)); cfg.input_len];
        for layer in &fwd.layers {
            for (t, acc) in back_sum.iter_mut().enumerate() {
                *acc += b.tape.value(layer.dif.backcast[t]);
                *acc += b.tape.value(layer.inh.backcast[t]);
            }
        }
        let y = fwd.y_hat.iter().map(|&v| b.tape.value(v).clone()).collect();
        let x_final = fwd.x_final.iter().map(|&v| b.tape.value(v).clone()).collect();
        (y, x0, back_sum, x_final)
    }

    #[test]
    fn forward_output_has_forecast_shape() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), unit_scaler(1), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_window(&mut rng, &cfg);
        let (tod, dow) = time_indices(&cfg);
        let trans = ring_transitions(cfg.num_nodes);
        let y = model.predict(x.view(), &tod, &dow, &trans).unwrap();
        assert_eq!(y.dim(), (cfg.horizon, cfg.num_nodes, cfg.out_channels));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decomposition_telescopes() {
        for order in [BlockOrder::DiffusionFirst, BlockOrder::InherentFirst] {
            let mut cfg = tiny_config();
            cfg.block_order = order;
            let model = Model::new(cfg, unit_scaler(1), 9).unwrap();
            let (_, x0, back_sum, x_final) = run_forward(&model, 10);
            for t in 0..x0.len() {
                let residual = &x0[t] - &back_sum[t];
                for (r, f) in residual.iter().zip(x_final[t].iter()) {
                    let denom = f.abs().max(1.0);
                    assert!(
                        ((r - f) / denom).abs() < 1e-5,
                        "step {t}: {r} vs {f} ({order:?})"
                    );
                }
            }
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), unit_scaler(1), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_window(&mut rng, &cfg);
        let (tod, dow) = time_indices(&cfg);
        let trans = ring_transitions(cfg.num_nodes);
        let mut b = Bound::new(&model.store);
        let fwd = forward_on_tape(
            &mut b,
            &cfg,
            &model.params,
            x.view(),
            &tod,
            &dow,
            &trans,
            &model.scaler,
        )
        .unwrap();
        for layer in &fwd.layers {
            let gate = layer.gate.as_ref().unwrap();
            for &g in gate {
                for &v in b.tape.value(g) {
                    assert!(v > 0.0 && v < 1.0);
                }
            }
            for bc in layer.dif.backcast.iter().chain(&layer.inh.backcast) {
                assert!(b.tape.value(*bc).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_parameter_model_predicts_scaler_mean() {
        let cfg = tiny_config();
        let scaler = Scaler {
            mean: vec![54.25],
            std: vec![9.5],
        };
        let mut model = Model::new(cfg.clone(), scaler, 13).unwrap();
        model.store.zero_all();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_window(&mut rng, &cfg);
        let (tod, dow) = time_indices(&cfg);
        let trans = ring_transitions(cfg.num_nodes);
        let y = model.predict(x.view(), &tod, &dow, &trans).unwrap();
        assert!(y.iter().all(|&v| v == 54.25));
    }

    #[test]
    fn zero_backcasts_make_layers_pass_through() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone(), unit_scaler(1), 15).unwrap();
        for layer in &model.params.layers {
            for id in [
                layer.dif.back_w,
                layer.dif.back_b,
                layer.inh.back_w,
                layer.inh.back_b,
            ] {
                model.store.value_mut(id).fill(0.0);
            }
        }
        let (_, x0, _, x_final) = run_forward(&model, 16);
        for (a, bvals) in x0.iter().zip(&x_final) {
            for (x, y) in a.iter().zip(bvals.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), unit_scaler(1), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.checkpoint().save(&path).unwrap();
        let restored = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(restored.config, model.config);
        for id in model.store.ids() {
            assert_eq!(model.store.value(id), restored.store.value(id));
        }
        let (y1, ..) = run_forward(&model, 18);
        let (y2, ..) = run_forward(&restored, 18);
        for (a, bvals) in y1.iter().zip(&y2) {
            assert_eq!(a, bvals);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::new(cfg, unit_scaler(1), 19).unwrap();
        let (y1, ..) = run_forward(&model, 20);
        let (y2, ..) = run_forward(&model, 20);
        for (a, bvals) in y1.iter().zip(&y2) {
            assert_eq!(a, bvals);
        }
    }

    #[test]
    fn ablation_flags_change_the_function() {
        let base_cfg = tiny_config();
        let base = Model::new(base_cfg.clone(), unit_scaler(1), 21).unwrap();
        let (y_base, ..) = run_forward(&base, 22);

        let variants = [
            ModelConfig {
                use_gate: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_residual: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_gate: false,
                use_residual: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_dynamic_graph: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_adaptive: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_gru: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                use_attention: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                autoregressive: false,
                ..base_cfg.clone()
            },
            ModelConfig {
                block_order: BlockOrder::InherentFirst,
                ..base_cfg
            },
        ];
        for cfg in variants {
            // Same seed: identical initialization streams, different wiring.
            let model = Model::new(cfg.clone(), unit_scaler(1), 21).unwrap();
            assert_eq!(model.store.len(), base.store.len());
            let (y, ..) = run_forward(&model, 22);
            let differs = y
                .iter()
                .zip(&y_base)
                .any(|(a, bvals)| a.iter().zip(bvals.iter()).any(|(x, y)| x != y));
            assert!(differs, "variant {cfg:?} did not change the output");
        }
    }

    #[test]
    fn non_finite_parameters_name_the_failing_block() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random_window(&mut rng, &cfg);
        let (tod, dow) = time_indices(&cfg);
        let trans = ring_transitions(cfg.num_nodes);

        let mut model = Model::new(cfg.clone(), unit_scaler(1), 23).unwrap();
        model.store.value_mut(model.params.input_w).fill(f64::NAN);
        let msg = model
            .predict(x.view(), &tod, &dow, &trans)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("layer 0"), "{msg}");
        assert!(msg.contains("input projection"), "{msg}");

        let mut model = Model::new(cfg.clone(), unit_scaler(1), 23).unwrap();
        let conv = model.params.layers[1].dif.conv_w[0][0];
        model.store.value_mut(conv).fill(f64::NAN);
        let msg = model
            .predict(x.view(), &tod, &dow, &trans)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("layer 1"), "{msg}");
        assert!(msg.contains("diffusion"), "{msg}");
    }

    #[test]
    fn window_shape_mismatch_is_rejected() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), unit_scaler(1), 25).unwrap();
        let x = Array3::<f64>::zeros((3, cfg.num_nodes, 1));
        let (tod, dow) = time_indices(&cfg);
        let trans = ring_transitions(cfg.num_nodes);
        let err = model
            .predict(x.view(), &tod[..3], &dow[..3], &trans)
            .unwrap_err();
        assert!(err.to_string().contains("window shape"));
    }
}

//! Learned transition matrices: the self-adaptive matrix built from node
//! embeddings and the per-window dynamic matrices that modulate the static
//! transitions.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::params::{Bound, ParamId, ParamStore};

/// Globally shared embedding tables: source/target node embeddings plus
/// time-of-day and day-of-week slot embeddings. The estimation gate, the
/// self-adaptive matrix and the dynamic graph all read these same tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingIds {
    pub e_u: ParamId,
    pub e_d: ParamId,
    pub t_d: ParamId,
    pub t_w: ParamId,
}

pub fn register_embeddings(
    store: &mut ParamStore,
    n_nodes: usize,
    embed_dim: usize,
    slots_per_day: usize,
    rng: &mut ChaCha8Rng,
) -> EmbeddingIds {
    EmbeddingIds {
        e_u: store.add_embedding("embed.node_source", n_nodes, embed_dim, rng),
        e_d: store.add_embedding("embed.node_target", n_nodes, embed_dim, rng),
        t_d: store.add_embedding("embed.time_of_day", slots_per_day, embed_dim, rng),
        t_w: store.add_embedding("embed.day_of_week", crate::data::DAYS_PER_WEEK, embed_dim, rng),
    }
}

/// `P_apt = row-softmax(ReLU(E_d E_u^T))`: dense, strictly positive and
/// row-stochastic. Static across windows (only training changes it).
pub fn self_adaptive_transition(b: &mut Bound, emb: &EmbeddingIds) -> Var {
    let e_u = b.var(emb.e_u);
    let e_d = b.var(emb.e_d);
    let e_u_t = b.tape.transpose(e_u);
    let scores = b.tape.matmul(e_d, e_u_t);
    let scores = b.tape.relu(scores);
    b.tape.row_softmax(scores)
}

/// Parameters for dynamic-feature construction and the masked-attention
/// transitions. Registered once per model; the dynamic graph is computed once
/// per window and shared by all layers.
#[derive(Debug, Clone, Copy)]
pub struct DynGraphIds {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    /// Alignment projections taking the `d_e`-wide embeddings to width `d`
    /// so the feature matrix is exactly `N x 4d`.
    pub td_proj: ParamId,
    pub tw_proj: ParamId,
    pub node_proj: ParamId,
    pub wq_f: ParamId,
    pub wk_f: ParamId,
    pub wq_b: ParamId,
    pub wk_b: ParamId,
}

pub fn register_dyn_graph(
    store: &mut ParamStore,
    input_len: usize,
    hidden_dim: usize,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) -> DynGraphIds {
    let d = hidden_dim;
    DynGraphIds {
        fc1_w: store.add_weight("dyngraph.history_fc1.w", input_len * d, d, rng),
        fc1_b: store.add_bias("dyngraph.history_fc1.b", d),
        fc2_w: store.add_weight("dyngraph.history_fc2.w", d, d, rng),
        fc2_b: store.add_bias("dyngraph.history_fc2.b", d),
        td_proj: store.add_weight("dyngraph.time_of_day_proj", embed_dim, d, rng),
        tw_proj: store.add_weight("dyngraph.day_of_week_proj", embed_dim, d, rng),
        node_proj: store.add_weight("dyngraph.node_proj", embed_dim, d, rng),
        wq_f: store.add_weight("dyngraph.forward.wq", 4 * d, d, rng),
        wk_f: store.add_weight("dyngraph.forward.wk", 4 * d, d, rng),
        wq_b: store.add_weight("dyngraph.backward.wq", 4 * d, d, rng),
        wk_b: store.add_weight("dyngraph.backward.wk", 4 * d, d, rng),
    }
}

/// Builds `(DF_u, DF_d)`, each `N x 4d`: traffic history squeezed to `N x d`
/// by a two-layer FC, the anchor step's time-of-day and day-of-week
/// embeddings broadcast to every node, and the source (resp. target) node
/// embeddings — all aligned to width `d`.
pub fn build_dynamic_features(
    b: &mut Bound,
    ids: &DynGraphIds,
    emb: &EmbeddingIds,
    x_latent: &[Var],
    tod_t: usize,
    dow_t: usize,
) -> (Var, Var) {
    let (n, d) = b.tape.shape(x_latent[0]);
    let t_h = x_latent.len();

    // N x (T_h*d) history, reordered channel-major: column c*T_h + t holds
    // channel c of step t, matching X_c = X[:, :, c]^T laid side by side.
    let step_major = b.tape.concat_cols(x_latent);
    let mut idx = Vec::with_capacity(t_h * d);
    for c in 0..d {
        for t in 0..t_h {
            idx.push(t * d + c);
        }
    }
    let hist = b.tape.gather_cols(step_major, &idx);

    let fc1_w = b.var(ids.fc1_w);
    let fc1_b = b.var(ids.fc1_b);
    let fc2_w = b.var(ids.fc2_w);
    let fc2_b = b.var(ids.fc2_b);
    let h1 = b.tape.matmul(hist, fc1_w);
    let h1 = b.tape.add_bias(h1, fc1_b);
    let h1 = b.tape.relu(h1);
    let h2 = b.tape.matmul(h1, fc2_w);
    let fc_out = b.tape.add_bias(h2, fc2_b);

    let t_d = b.var(emb.t_d);
    let t_w = b.var(emb.t_w);
    let td_proj = b.var(ids.td_proj);
    let tw_proj = b.var(ids.tw_proj);
    let td_row = b.tape.select_row(t_d, tod_t);
    let td_row = b.tape.matmul(td_row, td_proj);
    let td_full = b.tape.broadcast_row(td_row, n);
    let tw_row = b.tape.select_row(t_w, dow_t);
    let tw_row = b.tape.matmul(tw_row, tw_proj);
    let tw_full = b.tape.broadcast_row(tw_row, n);

    let node_proj = b.var(ids.node_proj);
    let e_u = b.var(emb.e_u);
    let e_d = b.var(emb.e_d);
    let e_u_proj = b.tape.matmul(e_u, node_proj);
    let e_d_proj = b.tape.matmul(e_d, node_proj);

    let df_u = b.tape.concat_cols(&[fc_out, td_full, tw_full, e_u_proj]);
    let df_d = b.tape.concat_cols(&[fc_out, td_full, tw_full, e_d_proj]);
    (df_u, df_d)
}

/// Masks the static transitions by per-window attention:
/// `P_dy = P ⊙ row-softmax((DF W_Q)(DF W_K)^T / sqrt(d))`.
pub fn dynamic_transitions(
    b: &mut Bound,
    ids: &DynGraphIds,
    df_u: Var,
    df_d: Var,
    p_f: Var,
    p_b: Var,
    hidden_dim: usize,
) -> (Var, Var) {
    let scale = 1.0 / (hidden_dim as f64).sqrt();
    let mask = |b: &mut Bound, df: Var, wq: ParamId, wk: ParamId| -> Var {
        let wq = b.var(wq);
        let wk = b.var(wk);
        let q = b.tape.matmul(df, wq);
        let k = b.tape.matmul(df, wk);
        let k_t = b.tape.transpose(k);
        let scores = b.tape.matmul(q, k_t);
        let scores = b.tape.scale(scores, scale);
        b.tape.row_softmax(scores)
    };
    let mask_f = mask(b, df_u, ids.wq_f, ids.wk_f);
    let mask_b = mask(b, df_d, ids.wq_b, ids.wk_b);
    let p_dy_f = b.tape.mul(p_f, mask_f);
    let p_dy_b = b.tape.mul(p_b, mask_b);
    (p_dy_f, p_dy_b)
}

//! Diffusion block: spatial-temporal localized convolution over the gated
//! diffusion signal, with an auto-regressive forecast branch and a backcast
//! branch feeding the residual decomposition.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{affine, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::{Error, Result};

/// Localized transition matrices for orders `1..=k_s`: each is `k_t`
/// horizontal copies of `P^k` with the diagonal zeroed. The power is taken
/// first; the mask applies to the result, not the base matrix.
pub fn build_localized_transition(p: &Array2<f64>, k_s: usize, k_t: usize) -> Vec<Array2<f64>> {
    let n = p.nrows();
    let mut out = Vec::with_capacity(k_s);
    let mut power = p.clone();
    for k in 1..=k_s {
        let mut masked = power.clone();
        for i in 0..n {
            masked[[i, i]] = 0.0;
        }
        let mut wide = Array2::zeros((n, k_t * n));
        for c in 0..k_t {
            wide.slice_mut(s![.., c * n..(c + 1) * n]).assign(&masked);
        }
        out.push(wide);
        if k < k_s {
            power = power.dot(p);
        }
    }
    out
}

/// Stacks `ReLU(X_{t-k_t+1} W_{k_t-1}) ... ReLU(X_t W_0)` vertically —
/// oldest step first, weight index equal to the step's lag. `window` is
/// chronological; `weights[lag]` projects the input `lag` steps back.
pub fn build_localized_features(
    window: &[Array2<f64>],
    weights: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let k_t = weights.len();
    if window.len() != k_t {
        return Err(Error::shape(format!(
            "localized features need {} steps, got {}",
            k_t,
            window.len()
        )));
    }
    let n = window[0].nrows();
    let d_out = weights[0].ncols();
    let mut out = Array2::zeros((k_t * n, d_out));
    for (block, x) in window.iter().enumerate() {
        let w = &weights[k_t - 1 - block];
        if x.nrows() != n || x.ncols() != w.nrows() || w.ncols() != d_out {
            return Err(Error::shape(format!(
                "localized feature block {}: input {}x{} against weight {}x{}",
                block,
                x.nrows(),
                x.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        let projected = x.dot(w).mapv(|v| v.max(0.0));
        out.slice_mut(s![block * n..(block + 1) * n, ..])
            .assign(&projected);
    }
    Ok(out)
}

/// `H = Σ_branch Σ_k (P_lc)^k X_lc W_k` — the reference convolution used by
/// the tests to pin down the tape implementation. `transitions[br][k-1]` is
/// `N x k_t*N`, `weights[br][k-1]` is `d x d`.
pub fn st_localized_conv(
    x_lc: &Array2<f64>,
    transitions: &[Vec<Array2<f64>>],
    weights: &[Vec<Array2<f64>>],
) -> Array2<f64> {
    let n = transitions[0][0].nrows();
    let d = weights[0][0].ncols();
    let mut h = Array2::zeros((n, d));
    for (branch_t, branch_w) in transitions.iter().zip(weights) {
        for (t, w) in branch_t.iter().zip(branch_w) {
            h = h + t.dot(x_lc).dot(w);
        }
    }
    h
}

/// Per-layer diffusion parameters. All three convolution branches plus the
/// direct forecast head are registered regardless of ablation flags so the
/// initialization stream is identical across variants.
#[derive(Debug, Clone)]
pub struct DiffusionIds {
    /// Per-lag input projections for the localized feature stack (bias-free).
    pub feat_w: Vec<ParamId>,
    /// Per branch (forward, backward, adaptive), per order `k`: `d x d`
    /// convolution weights (bias-free).
    pub conv_w: Vec<Vec<ParamId>>,
    /// Pseudo-input projection used by the auto-regressive forecast.
    pub pseudo_w: ParamId,
    pub pseudo_b: ParamId,
    pub back_w: ParamId,
    pub back_b: ParamId,
    /// Direct multi-step head used instead of the auto-regressive loop when
    /// `autoregressive` is off.
    pub direct_w: ParamId,
    pub direct_b: ParamId,
}

pub fn register_diffusion(
    store: &mut ParamStore,
    layer: usize,
    hidden_dim: usize,
    k_s: usize,
    k_t: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> DiffusionIds {
    let d = hidden_dim;
    let feat_w = (0..k_t)
        .map(|lag| store.add_weight(format!("layer{layer}.dif.feat.lag{lag}"), d, d, rng))
        .collect();
    let conv_w = ["fwd", "bwd", "apt"]
        .iter()
        .map(|branch| {
            (1..=k_s)
                .map(|k| store.add_weight(format!("layer{layer}.dif.conv.{branch}.k{k}"), d, d, rng))
                .collect()
        })
        .collect();
    DiffusionIds {
        feat_w,
        conv_w,
        pseudo_w: store.add_weight(format!("layer{layer}.dif.pseudo.w"), d, d, rng),
        pseudo_b: store.add_bias(format!("layer{layer}.dif.pseudo.b"), d),
        back_w: store.add_weight(format!("layer{layer}.dif.backcast.w"), d, d, rng),
        back_b: store.add_bias(format!("layer{layer}.dif.backcast.b"), d),
        direct_w: store.add_weight(format!("layer{layer}.dif.direct.w"), d, horizon * d, rng),
        direct_b: store.add_bias(format!("layer{layer}.dif.direct.b"), horizon * d),
    }
}

/// Masked powers of a transition matrix on the tape: `P^k ⊙ (1 - I)` for
/// `k = 1..=k_s`. Transitions are window-level, so callers build these once
/// and share them across layers.
pub fn masked_transition_powers(b: &mut Bound, p: Var, k_s: usize) -> Vec<Var> {
    let n = b.tape.shape(p).0;
    let mask = b.cst(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            1.0
        }
    }));
    let mut out = Vec::with_capacity(k_s);
    let mut power = p;
    for k in 1..=k_s {
        out.push(b.tape.mul(power, mask));
        if k < k_s {
            power = b.tape.matmul(power, p);
        }
    }
    out
}

/// Hidden, forecast and backcast sequences produced by one block (diffusion
/// or inherent) inside a layer.
#[derive(Debug)]
pub struct BlockOutput {
    pub hidden: Vec<Var>,
    pub forecast: Vec<Var>,
    pub backcast: Vec<Var>,
}

/// The convolution applied to the summed feature blocks. Because every
/// localized transition is `k_t` copies of the same masked power `M_k`,
/// `(P_lc)^k X_lc` collapses to `M_k (Σ_blocks)` — same result, one matmul.
fn conv_step(b: &mut Bound, block_sum: Var, masks: &[Vec<Var>], conv_w: &[Vec<ParamId>]) -> Var {
    let mut terms = Vec::new();
    for (branch_masks, branch_w) in masks.iter().zip(conv_w) {
        for (&m, &w) in branch_masks.iter().zip(branch_w.iter()) {
            let spread = b.tape.matmul(m, block_sum);
            let w = b.var(w);
            terms.push(b.tape.matmul(spread, w));
        }
    }
    b.tape.add_n(&terms)
}

fn feature_sum(b: &mut Bound, window: &[Var], feat_w: &[Var]) -> Var {
    let k_t = feat_w.len();
    let blocks: Vec<Var> = (0..k_t)
        .map(|lag| {
            let x = window[k_t - 1 - lag];
            let p = b.tape.matmul(x, feat_w[lag]);
            b.tape.relu(p)
        })
        .collect();
    b.tape.add_n(&blocks)
}

pub(crate) fn backcast_seq(b: &mut Bound, hidden: &[Var], w: ParamId, bias: ParamId) -> Vec<Var> {
    let w = b.var(w);
    let bias = b.var(bias);
    hidden
        .iter()
        .map(|&h| {
            let a = affine(&mut b.tape, h, w, bias);
            b.tape.relu(a)
        })
        .collect()
}

pub(crate) fn direct_forecast(
    b: &mut Bound,
    last_hidden: Var,
    w: ParamId,
    bias: ParamId,
    horizon: usize,
    hidden_dim: usize,
) -> Vec<Var> {
    let w = b.var(w);
    let bias = b.var(bias);
    let wide = affine(&mut b.tape, last_hidden, w, bias);
    (0..horizon)
        .map(|j| {
            let idx: Vec<usize> = (j * hidden_dim..(j + 1) * hidden_dim).collect();
            b.tape.gather_cols(wide, &idx)
        })
        .collect()
}

/// Runs the diffusion block over a `T_h`-step window. Steps before `k_t - 1`
/// have no full trailing window and emit zero hidden states. The forecast
/// branch feeds each new hidden state back through a learned pseudo-input
/// projection, sliding the feature window forward one step at a time.
///
/// `masks` and `conv_w` are parallel: one masked-power set and one weight set
/// per active transition branch.
pub fn diffusion_block(
    b: &mut Bound,
    ids: &DiffusionIds,
    masks: &[Vec<Var>],
    conv_w: &[Vec<ParamId>],
    x_dif: &[Var],
    horizon: usize,
    autoregressive: bool,
) -> Result<BlockOutput> {
    let k_t = ids.feat_w.len();
    let t_h = x_dif.len();
    if t_h < k_t {
        return Err(Error::shape(format!(
            "diffusion window needs at least k_t = {k_t} steps, got {t_h}"
        )));
    }
    let (n, d) = b.tape.shape(x_dif[0]);
    let feat_w: Vec<Var> = ids.feat_w.iter().map(|&id| b.var(id)).collect();

    let mut hidden = Vec::with_capacity(t_h);
    for t in 0..t_h {
        if t + 1 < k_t {
            hidden.push(b.cst(Array2::zeros((n, d))));
            continue;
        }
        let sum = feature_sum(b, &x_dif[t + 1 - k_t..=t], &feat_w);
        hidden.push(conv_step(b, sum, masks, conv_w));
    }

    let forecast = if autoregressive {
        let pseudo_w = b.var(ids.pseudo_w);
        let pseudo_b = b.var(ids.pseudo_b);
        let mut window: Vec<Var> = x_dif[t_h - k_t..].to_vec();
        let mut newest = hidden[t_h - 1];
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let pseudo = affine(&mut b.tape, newest, pseudo_w, pseudo_b);
            window.remove(0);
            window.push(pseudo);
            let sum = feature_sum(b, &window, &feat_w);
            let h = conv_step(b, sum, masks, conv_w);
            out.push(h);
            newest = h;
        }
        out
    } else {
        direct_forecast(b, hidden[t_h - 1], ids.direct_w, ids.direct_b, horizon, d)
    };

    let backcast = backcast_seq(b, &hidden, ids.back_w, ids.back_b);
    Ok(BlockOutput {
        hidden,
        forecast,
        backcast,
    })
}

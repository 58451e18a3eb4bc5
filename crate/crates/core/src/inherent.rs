//! Inherent block: per-node GRU for short-range structure, positional
//! encoding plus multi-head self-attention for long-range structure, and the
//! sliding auto-regressive forecast that reuses cached keys and values.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{affine, Var};
use crate::diffusion::{backcast_seq, direct_forecast, BlockOutput};
use crate::params::{Bound, ParamId, ParamStore};

/// Which state the GRU's convex combination carries forward. `Standard` is
/// the conventional cell mixing the previous output; `Literal` mixes the
/// previous candidate state instead (the recurrent input to the gates is the
/// previous output either way).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GruUpdate {
    #[default]
    Standard,
    Literal,
}

#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct InherentIds {
    pub gru: GruIds,
    pub heads: Vec<HeadIds>,
    pub wo: ParamId,
    pub pseudo_w: ParamId,
    pub pseudo_b: ParamId,
    pub back_w: ParamId,
    pub back_b: ParamId,
    pub direct_w: ParamId,
    pub direct_b: ParamId,
}

pub fn register_inherent(
    store: &mut ParamStore,
    layer: usize,
    hidden_dim: usize,
    num_heads: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> InherentIds {
    let d = hidden_dim;
    let gru = GruIds {
        wz: store.add_weight(format!("layer{layer}.inh.gru.wz"), d, d, rng),
        uz: store.add_weight(format!("layer{layer}.inh.gru.uz"), d, d, rng),
        bz: store.add_bias(format!("layer{layer}.inh.gru.bz"), d),
        wr: store.add_weight(format!("layer{layer}.inh.gru.wr"), d, d, rng),
        ur: store.add_weight(format!("layer{layer}.inh.gru.ur"), d, d, rng),
        br: store.add_bias(format!("layer{layer}.inh.gru.br"), d),
        wh: store.add_weight(format!("layer{layer}.inh.gru.wh"), d, d, rng),
        uh: store.add_weight(format!("layer{layer}.inh.gru.uh"), d, d, rng),
        bh: store.add_bias(format!("layer{layer}.inh.gru.bh"), d),
    };
    let heads = (0..num_heads)
        .map(|s| HeadIds {
            wq: store.add_weight(format!("layer{layer}.inh.attn.h{s}.wq"), d, d, rng),
            wk: store.add_weight(format!("layer{layer}.inh.attn.h{s}.wk"), d, d, rng),
            wv: store.add_weight(format!("layer{layer}.inh.attn.h{s}.wv"), d, d, rng),
        })
        .collect();
    InherentIds {
        gru,
        heads,
        wo: store.add_weight(format!("layer{layer}.inh.attn.wo"), num_heads * d, d, rng),
        pseudo_w: store.add_weight(format!("layer{layer}.inh.pseudo.w"), d, d, rng),
        pseudo_b: store.add_bias(format!("layer{layer}.inh.pseudo.b"), d),
        back_w: store.add_weight(format!("layer{layer}.inh.backcast.w"), d, d, rng),
        back_b: store.add_bias(format!("layer{layer}.inh.backcast.b"), d),
        direct_w: store.add_weight(format!("layer{layer}.inh.direct.w"), d, horizon * d, rng),
        direct_b: store.add_bias(format!("layer{layer}.inh.direct.b"), horizon * d),
    }
}

/// Sinusoidal table `e[t, i] = sin(t / 10000^{2i/d})` for even `i` and
/// `cos` of the same argument for odd `i`. Not trainable; rows enter the
/// tape as constants.
pub fn positional_encoding(t_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, d), |(t, i)| {
        let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        if i % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// One GRU step. Returns the new output state and the candidate state; the
/// caller threads the candidate back in for the `Literal` update rule.
pub fn gru_step(
    b: &mut Bound,
    g: &GruIds,
    x: Var,
    h_prev: Var,
    prev_candidate: Var,
    update: GruUpdate,
) -> (Var, Var) {
    let wz = b.var(g.wz);
    let uz = b.var(g.uz);
    let bz = b.var(g.bz);
    let wr = b.var(g.wr);
    let ur = b.var(g.ur);
    let br = b.var(g.br);
    let wh = b.var(g.wh);
    let uh = b.var(g.uh);
    let bh = b.var(g.bh);

    let gate_pre = |b: &mut Bound, w: Var, u: Var, bias: Var| {
        let a = b.tape.matmul(x, w);
        let c = b.tape.matmul(h_prev, u);
        let s = b.tape.add(a, c);
        b.tape.add_bias(s, bias)
    };
    let z_pre = gate_pre(b, wz, uz, bz);
    let z = b.tape.sigmoid(z_pre);
    let r_pre = gate_pre(b, wr, ur, br);
    let r = b.tape.sigmoid(r_pre);

    let drive = b.tape.matmul(x, wh);
    let rec = b.tape.matmul(h_prev, uh);
    let rec = b.tape.add_bias(rec, bh);
    let gated = b.tape.mul(r, rec);
    let cand_pre = b.tape.add(drive, gated);
    let cand = b.tape.tanh(cand_pre);

    let carry = match update {
        GruUpdate::Standard => h_prev,
        GruUpdate::Literal => prev_candidate,
    };
    let one = {
        let shape = b.tape.shape(x);
        b.cst(Array2::ones(shape))
    };
    let keep_gate = b.tape.sub(one, z);
    let keep = b.tape.mul(keep_gate, carry);
    let take = b.tape.mul(z, cand);
    (b.tape.add(keep, take), cand)
}

/// Single attention head over an explicit key/value window. Returns the
/// row-stochastic weights alongside the combined output so tests can check
/// the softmax directly.
pub(crate) fn attention_head(
    b: &mut Bound,
    q: Var,
    keys: &[Var],
    values: &[Var],
    scale: f64,
) -> (Var, Var) {
    let scores = b.tape.attn_scores(q, keys, scale);
    let weights = b.tape.row_softmax(scores);
    let combined = b.tape.attn_combine(weights, values);
    (weights, combined)
}

#[derive(Debug, Clone, Copy)]
pub struct InherentFlags {
    pub use_gru: bool,
    pub use_attention: bool,
    pub update: GruUpdate,
}

impl Default for InherentFlags {
    fn default() -> Self {
        Self {
            use_gru: true,
            use_attention: true,
            update: GruUpdate::Standard,
        }
    }
}

struct HeadState {
    wq: Var,
    wk: Var,
    wv: Var,
    keys: Vec<Var>,
    values: Vec<Var>,
}

/// Runs the inherent block over a `T_h`-step window and rolls the forecast
/// forward `horizon` steps. During the slide, positional encodings keep
/// advancing (step `T_h + j` gets position `T_h + j`), surviving keys and
/// values are reused, and only the newest query is computed.
pub fn inherent_block(
    b: &mut Bound,
    ids: &InherentIds,
    x_inh: &[Var],
    horizon: usize,
    flags: InherentFlags,
    autoregressive: bool,
) -> BlockOutput {
    let t_h = x_inh.len();
    let (n, d) = b.tape.shape(x_inh[0]);

    let mut gru_out = Vec::with_capacity(t_h);
    let mut gru_state = b.cst(Array2::zeros((n, d)));
    let mut gru_cand = gru_state;
    if flags.use_gru {
        for &x in x_inh {
            let (h, c) = gru_step(b, &ids.gru, x, gru_state, gru_cand, flags.update);
            gru_state = h;
            gru_cand = c;
            gru_out.push(h);
        }
    } else {
        gru_out.extend_from_slice(x_inh);
    }

    let pseudo_w = b.var(ids.pseudo_w);
    let pseudo_b = b.var(ids.pseudo_b);

    let (hidden, forecast) = if flags.use_attention {
        let pe = positional_encoding(t_h + horizon, d);
        let pe_row = |b: &mut Bound, pos: usize| {
            let row = pe.row(pos).to_owned().insert_axis(ndarray::Axis(0));
            b.cst(row)
        };
        let scale = 1.0 / (d as f64).sqrt();
        let wo = b.var(ids.wo);
        let mut heads: Vec<HeadState> = ids
            .heads
            .iter()
            .map(|h| HeadState {
                wq: b.var(h.wq),
                wk: b.var(h.wk),
                wv: b.var(h.wv),
                keys: Vec::with_capacity(t_h + horizon),
                values: Vec::with_capacity(t_h + horizon),
            })
            .collect();

        let mut h_pe = Vec::with_capacity(t_h);
        for (t, &g) in gru_out.iter().enumerate() {
            let row = pe_row(b, t);
            let hp = b.tape.add_bias(g, row);
            h_pe.push(hp);
            for hs in &mut heads {
                hs.keys.push(b.tape.matmul(hp, hs.wk));
                hs.values.push(b.tape.matmul(hp, hs.wv));
            }
        }

        let attend = |b: &mut Bound, heads: &[HeadState], query_src: Var, start: usize| {
            let mut outs = Vec::with_capacity(heads.len());
            for hs in heads {
                let q = b.tape.matmul(query_src, hs.wq);
                let window_k = &hs.keys[start..start + t_h];
                let window_v = &hs.values[start..start + t_h];
                let (_, combined) = attention_head(b, q, window_k, window_v, scale);
                outs.push(combined);
            }
            let cat = b.tape.concat_cols(&outs);
            b.tape.matmul(cat, wo)
        };

        let mut hidden = Vec::with_capacity(t_h);
        for t in 0..t_h {
            hidden.push(attend(b, &heads, h_pe[t], 0));
        }

        let forecast = if autoregressive {
            let mut out = Vec::with_capacity(horizon);
            let mut newest = hidden[t_h - 1];
            for j in 0..horizon {
                let pseudo = affine(&mut b.tape, newest, pseudo_w, pseudo_b);
                let g_new = if flags.use_gru {
                    let (h, c) = gru_step(b, &ids.gru, pseudo, gru_state, gru_cand, flags.update);
                    gru_state = h;
                    gru_cand = c;
                    h
                } else {
                    pseudo
                };
                let row = pe_row(b, t_h + j);
                let hp = b.tape.add_bias(g_new, row);
                for hs in &mut heads {
                    hs.keys.push(b.tape.matmul(hp, hs.wk));
                    hs.values.push(b.tape.matmul(hp, hs.wv));
                }
                let state = attend(b, &heads, hp, j + 1);
                out.push(state);
                newest = state;
            }
            out
        } else {
            direct_forecast(b, hidden[t_h - 1], ids.direct_w, ids.direct_b, horizon, d)
        };
        (hidden, forecast)
    } else {
        let hidden = gru_out;
        let forecast = if autoregressive {
            let mut out = Vec::with_capacity(horizon);
            let mut newest = hidden[t_h - 1];
            for _ in 0..horizon {
                let pseudo = affine(&mut b.tape, newest, pseudo_w, pseudo_b);
                let g_new = if flags.use_gru {
                    let (h, c) = gru_step(b, &ids.gru, pseudo, gru_state, gru_cand, flags.update);
                    gru_state = h;
                    gru_cand = c;
                    h
                } else {
                    pseudo
                };
                out.push(g_new);
                newest = g_new;
            }
            out
        } else {
            direct_forecast(b, hidden[t_h - 1], ids.direct_w, ids.direct_b, horizon, d)
        };
        (hidden, forecast)
    };

    let backcast = backcast_seq(b, &hidden, ids.back_w, ids.back_b);
    BlockOutput {
        hidden,
        forecast,
        backcast,
    }
}

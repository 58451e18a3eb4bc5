//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation performed during one forward pass as a
//! node holding its result and a reference to its inputs. [`Tape::backward`]
//! then walks the nodes in reverse and accumulates gradients with explicit
//! per-op rules. Values are plain `ndarray` matrices; a [`Var`] is an index
//! into the tape.
//!
//! The op set is deliberately small: exactly what the forecasting model needs,
//! each rule unit-tested against central finite differences.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    /// Input matrix; trainable leaves are created with `needs_grad` set.
    Leaf,
    /// `a @ b`
    MatMul(Var, Var),
    /// `a + b`, same shape
    Add(Var, Var),
    /// `a - b`, same shape
    Sub(Var, Var),
    /// Elementwise `a * b`, same shape
    Mul(Var, Var),
    /// `a + b` with `b` a `1 x d` row broadcast over the rows of `a`
    AddBias(Var, Var),
    /// `a * c` for scalar constant `c`
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    /// Softmax along each row
    RowSoftmax(Var),
    Transpose(Var),
    /// Horizontal concatenation, widths summed
    ConcatCols(Vec<Var>),
    /// Vertical concatenation, heights summed
    ConcatRows(Vec<Var>),
    /// Row `r` of `a` as a `1 x d` matrix
    SelectRow(Var, usize),
    /// `1 x d` row repeated into an `n x d` matrix
    BroadcastRow(Var),
    /// `a(n x d) * s(n x 1)` with `s` broadcast across the columns
    MulColBroadcast(Var, Var),
    /// Columns permuted/gathered: `out[:, j] = a[:, idx[j]]`
    GatherCols(Var, Vec<usize>),
    /// Sum of all entries as a `1 x 1` matrix
    SumAll(Var),
    /// Sum of several same-shape matrices
    AddN(Vec<Var>),
    /// `out[:, t] = scale * rowsum(q * keys[t])` — one attention-score column
    /// per key matrix, avoiding per-row tape nodes.
    AttnScores { q: Var, keys: Vec<Var>, scale: f64 },
    /// `out = sum_t w[:, t] * values[t]` — weighted mix of value matrices
    /// with per-row weights.
    AttnCombine { w: Var, values: Vec<Var> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    /// False when no trainable leaf feeds this node; backward skips it.
    needs_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` can receive one.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.0].as_ref()
    }

    /// Like [`Grads::get`] but materializes zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.g[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// Records a forward computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input; gradients accumulate here.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input (data, masks, precomputed tables).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dims");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + bias` where `bias` is `1 x d` and broadcasts over rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        debug_assert_eq!(self.shape(bias).0, 1, "bias must be a row");
        debug_assert_eq!(self.shape(a).1, self.shape(bias).1, "bias width");
        let v = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.ng(a);
        self.push(v, Op::RowSoftmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("column concat shapes");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("row concat shapes");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .row(r)
            .to_owned()
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::SelectRow(a, r), ng)
    }

    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        debug_assert_eq!(self.shape(a).0, 1, "broadcast_row input must be a row");
        let row = self.nodes[a.0].value.row(0).to_owned();
        let d = row.len();
        let v = Array2::from_shape_fn((n, d), |(_, j)| row[j]);
        let ng = self.ng(a);
        self.push(v, Op::BroadcastRow(a), ng)
    }

    /// `a * s` with `s` an `n x 1` column broadcast across the columns of `a`.
    pub fn mul_col_broadcast(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.shape(s).1, 1, "scale must be a column");
        debug_assert_eq!(self.shape(a).0, self.shape(s).0, "scale height");
        let v = &self.nodes[a.0].value * &self.nodes[s.0].value;
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulColBroadcast(a, s), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_shape_fn((x.nrows(), idx.len()), |(i, j)| x[[i, idx[j]]]);
        let ng = self.ng(a);
        self.push(v, Op::GatherCols(a, idx.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            debug_assert_eq!(self.shape(parts[0]), self.shape(*p), "add_n shapes");
            v += &self.nodes[p.0].value;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::AddN(parts.to_vec()), ng)
    }

    /// Attention scores for one query matrix against `keys.len()` key
    /// matrices: `out[i, t] = scale * dot(q[i, :], keys[t][i, :])`.
    pub fn attn_scores(&mut self, q: Var, keys: &[Var], scale: f64) -> Var {
        let (n, d) = self.shape(q);
        let mut v = Array2::zeros((n, keys.len()));
        for (t, k) in keys.iter().enumerate() {
            debug_assert_eq!(self.shape(*k), (n, d), "key shape");
            let prod = &self.nodes[q.0].value * &self.nodes[k.0].value;
            let col = prod.sum_axis(Axis(1));
            v.column_mut(t).assign(&(col * scale));
        }
        let ng = self.ng(q) || keys.iter().any(|k| self.ng(*k));
        self.push(
            v,
            Op::AttnScores {
                q,
                keys: keys.to_vec(),
                scale,
            },
            ng,
        )
    }

    /// Row-wise weighted sum of value matrices:
    /// `out[i, :] = sum_t w[i, t] * values[t][i, :]`.
    pub fn attn_combine(&mut self, w: Var, values: &[Var]) -> Var {
        let (n, t_len) = self.shape(w);
        debug_assert_eq!(t_len, values.len(), "one weight column per value");
        let d = self.shape(values[0]).1;
        let mut v = Array2::zeros((n, d));
        for (t, val) in values.iter().enumerate() {
            debug_assert_eq!(self.shape(*val), (n, d), "value shape");
            let wt = self.nodes[w.0].value.column(t);
            let wt = wt.insert_axis(Axis(1));
            v += &(&self.nodes[val.0].value * &wt);
        }
        let ng = self.ng(w) || values.iter().any(|p| self.ng(*p));
        self.push(
            v,
            Op::AttnCombine {
                w,
                values: values.to_vec(),
            },
            ng,
        )
    }

    /// Backpropagate from a scalar (`1 x 1`) loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut g: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[loss.0] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                g[id] = None;
                continue;
            }
            let node = &self.nodes[id];
            let is_leaf = matches!(node.op, Op::Leaf);
            // Leaves keep their accumulated gradient; interior nodes give
            // theirs up once it has been pushed to their inputs.
            let gout = if is_leaf {
                continue;
            } else {
                match g[id].take() {
                    Some(v) => v,
                    None => continue,
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = gout.dot(&self.nodes[b.0].value.t());
                        acc(&mut g, *a, da);
                    }
                    if self.ng(*b) {
                        let db = self.nodes[a.0].value.t().dot(&gout);
                        acc(&mut g, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut g, *a, gout.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut g, *b, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut g, *a, gout.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut g, *b, -gout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut g, *a, &gout * &self.nodes[b.0].value);
                    }
                    if self.ng(*b) {
                        acc(&mut g, *b, &gout * &self.nodes[a.0].value);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(*a) {
                        acc(&mut g, *a, gout.clone());
                    }
                    if self.ng(*bias) {
                        let db = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut g, *bias, db);
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut g, *a, gout.mapv(|x| x * c));
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| (x > 0.0) as u8 as f64);
                    acc(&mut g, *a, &gout * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut g, *a, &gout * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut g, *a, &gout * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut g, *a, &gout * &sign);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = gout.row(i);
                        let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = (gi[j] - dot) * yi[j];
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Transpose(a) => {
                    acc(&mut g, *a, gout.t().to_owned());
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.ng(*p) {
                            let slice = gout
                                .slice(ndarray::s![.., off..off + w])
                                .to_owned();
                            acc(&mut g, *p, slice);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.ng(*p) {
                            let slice = gout
                                .slice(ndarray::s![off..off + h, ..])
                                .to_owned();
                            acc(&mut g, *p, slice);
                        }
                        off += h;
                    }
                }
                Op::SelectRow(a, r) => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Array2::zeros((rows, cols));
                    da.row_mut(*r).assign(&gout.row(0));
                    acc(&mut g, *a, da);
                }
                Op::BroadcastRow(a) => {
                    let da = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *a, da);
                }
                Op::MulColBroadcast(a, s) => {
                    if self.ng(*a) {
                        acc(&mut g, *a, &gout * &self.nodes[s.0].value);
                    }
                    if self.ng(*s) {
                        let ds = (&gout * &self.nodes[a.0].value)
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1));
                        acc(&mut g, *s, ds);
                    }
                }
                Op::GatherCols(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Array2::zeros((rows, cols));
                    for (j, &src) in idx.iter().enumerate() {
                        let col = gout.column(j);
                        let mut dst = da.column_mut(src);
                        dst += &col;
                    }
                    acc(&mut g, *a, da);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    let da = Array2::from_elem((rows, cols), gout[[0, 0]]);
                    acc(&mut g, *a, da);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        if self.ng(*p) {
                            acc(&mut g, *p, gout.clone());
                        }
                    }
                }
                Op::AttnScores { q, keys, scale } => {
                    let qv = &self.nodes[q.0].value;
                    if self.ng(*q) {
                        let mut dq = Array2::zeros(qv.raw_dim());
                        for (t, k) in keys.iter().enumerate() {
                            let col = gout.column(t).insert_axis(Axis(1));
                            dq += &(&self.nodes[k.0].value * &col);
                        }
                        acc(&mut g, *q, dq.mapv(|x| x * scale));
                    }
                    for (t, k) in keys.iter().enumerate() {
                        if self.ng(*k) {
                            let col = gout.column(t).insert_axis(Axis(1));
                            let dk = (qv * &col).mapv(|x| x * scale);
                            acc(&mut g, *k, dk);
                        }
                    }
                }
                Op::AttnCombine { w, values } => {
                    if self.ng(*w) {
                        let (n, t_len) = self.shape(*w);
                        let mut dw = Array2::zeros((n, t_len));
                        for (t, val) in values.iter().enumerate() {
                            let col = (&gout * &self.nodes[val.0].value).sum_axis(Axis(1));
                            dw.column_mut(t).assign(&col);
                        }
                        acc(&mut g, *w, dw);
                    }
                    for (t, val) in values.iter().enumerate() {
                        if self.ng(*val) {
                            let col = self.nodes[w.0].value.column(t).insert_axis(Axis(1));
                            acc(&mut g, *val, &gout * &col);
                        }
                    }
                }
            }
        }
        Grads { g }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut g[v.0] {
        Some(cur) => *cur += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Convenience: ReLU applied to a bias-free linear map, `relu(x @ w)`.
pub fn relu_linear(t: &mut Tape, x: Var, w: Var) -> Var {
    let h = t.matmul(x, w);
    t.relu(h)
}

/// Affine map with row-broadcast bias, `x @ w + b`.
pub fn affine(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let h = t.matmul(x, w);
    t.add_bias(h, b)
}

/// Mean of all entries: `sum(x) / len(x)`.
pub fn mean_all(t: &mut Tape, x: Var) -> Var {
    let (r, c) = t.shape(x);
    let s = t.sum_all(x);
    t.scale(s, 1.0 / (r * c) as f64)
}

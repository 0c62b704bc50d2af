use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Param(ParamId),
    Owned(Array2<f64>),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Gather {
        table: Var,
        idx: Vec<Option<usize>>,
    },
    CausalShift {
        x: Var,
        seq_len: usize,
        shift: usize,
    },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        norm: f64,
        probs: Array2<f64>,
    },
    Mse {
        pred: Var,
        target: Array2<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
    ChannelMix {
        x: Var,
        w: Var,
        channels: usize,
        seq_len: usize,
    },
    Reshape(Var),
}

struct Node {
    value: Value,
    op: Op,
}

/// Reverse-mode tape over 2-D `f64` tensors.
///
/// Parameters are read in place from the borrowed store; every other value is
/// owned by the tape. Rows are the batch/time axis, columns the feature axis.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

pub(crate) fn layer_norm_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let e = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / e;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / e;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row *= is;
        inv.push(is);
    }
    (xhat, inv)
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Causal multi-head attention on contiguous sequences of `seq_len` rows.
/// Returns the output and the per (sequence, head) probability matrices.
fn attention_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    seq_len: usize,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (n, e) = q.dim();
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n, e));
    let mut probs = Vec::with_capacity(n / seq_len * heads);
    for s0 in (0..n).step_by(seq_len) {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![s0..s0 + seq_len, cols.clone()]);
            let ks = k.slice(s![s0..s0 + seq_len, cols.clone()]);
            let vs = v.slice(s![s0..s0 + seq_len, cols.clone()]);
            let mut sc = qs.dot(&ks.t()) * scale;
            for i in 0..seq_len {
                for j in i + 1..seq_len {
                    sc[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows(&mut sc);
            out.slice_mut(s![s0..s0 + seq_len, cols]).assign(&sc.dot(&vs));
            probs.push(sc);
        }
    }
    (out, probs)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.params.get(*id),
            Value::Owned(a) => a,
        }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Adds a 1×F row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1, "bias must be a single row");
        let v = self.value(a) + &b.row(0);
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row lookup. `None` produces a zero row that passes no gradient.
    pub fn gather(&mut self, table: Var, idx: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((idx.len(), t.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).assign(&t.row(i));
            }
        }
        self.push(v, Op::Gather { table, idx })
    }

    pub fn gather_all(&mut self, table: Var, idx: &[usize]) -> Var {
        self.gather(table, idx.iter().map(|&i| Some(i)).collect())
    }

    /// Within each block of `seq_len` rows, row r takes row r − shift (zero before the block start).
    pub fn causal_shift(&mut self, x: Var, seq_len: usize, shift: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        assert_eq!(n % seq_len, 0, "rows must be a multiple of the sequence length");
        let mut v = Array2::zeros(xv.dim());
        if shift < seq_len {
            for s0 in (0..n).step_by(seq_len) {
                v.slice_mut(s![s0 + shift..s0 + seq_len, ..])
                    .assign(&xv.slice(s![s0..s0 + seq_len - shift, ..]));
            }
        }
        self.push(v, Op::CausalShift { x, seq_len, shift })
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|&v| self.value(v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(vars.to_vec()))
    }

    /// Row-wise layer normalisation with 1×F gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(self.value(x).view());
        let out = &xhat * &self.value(gain).row(0) + &self.value(bias).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Causal multi-head self-attention over contiguous blocks of `seq_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (n, e) = self.value(q).dim();
        assert_eq!(n % seq_len, 0);
        assert_eq!(e % heads, 0);
        let (out, probs) = attention_forward(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            seq_len,
            heads,
        );
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Weighted cross-entropy: Σ_r w_r · −log softmax(logits_r)[target_r] / norm.
    pub fn softmax_ce(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>, norm: f64) -> Var {
        let mut probs = self.value(logits).to_owned();
        assert_eq!(targets.len(), probs.nrows());
        assert_eq!(weights.len(), probs.nrows());
        softmax_rows(&mut probs);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != 0.0 {
                loss -= w * probs[[r, t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let loss = if norm > 0.0 { loss / norm } else { 0.0 };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                norm,
                probs,
            },
        )
    }

    /// Weighted squared error: Σ_r w_r · Σ_f (pred − target)² / norm.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>, weights: Vec<f64>, norm: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        let mut loss = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                loss += w * (&p.row(r) - &target.row(r)).mapv(|d| d * d).sum();
            }
        }
        let loss = if norm > 0.0 { loss / norm } else { 0.0 };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mse {
                pred,
                target,
                weights,
                norm,
            },
        )
    }

    /// Mixes channels: rows are laid out (batch, channel, time) and
    /// out[b, c', t] = Σ_c w[c, c'] · x[b, c, t].
    pub fn channel_mix(&mut self, x: Var, w: Var, channels: usize, seq_len: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.dim(), (channels, channels));
        assert_eq!(xv.nrows() % (channels * seq_len), 0);
        let out = mix_forward(xv.view(), wv.view(), channels, seq_len);
        self.push(
            out,
            Op::ChannelMix {
                x,
                w,
                channels,
                seq_len,
            },
        )
    }

    /// Row-major reinterpretation with `rows` rows.
    pub fn reshape(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % rows.max(1), 0, "reshape must preserve the element count");
        let cols = xv.len() / rows.max(1);
        let flat: Vec<f64> = xv.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        self.push(out, Op::Reshape(x))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        acc(&mut param_grads[id.0], g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[b.0], gb);
                    acc(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g * *c),
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.own(i))
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads[a.0], g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.own(i))
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads[a.0], g);
                }
                Op::Gelu(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads[a.0], g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads[a.0], g);
                }
                Op::Gather { table, idx } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, ix) in idx.iter().enumerate() {
                        if let Some(t) = *ix {
                            let mut row = gt.row_mut(t);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut grads[table.0], gt);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads[x.0], Array2::from_shape_vec(dim, flat).expect("same size"));
                }
                Op::CausalShift { x, seq_len, shift } => {
                    let (n, _) = g.dim();
                    let mut gx = Array2::zeros(g.dim());
                    if *shift < *seq_len {
                        for s0 in (0..n).step_by(*seq_len) {
                            gx.slice_mut(s![s0..s0 + seq_len - shift, ..])
                                .assign(&g.slice(s![s0 + shift..s0 + seq_len, ..]));
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::ConcatCols(vars) => {
                    let mut c0 = 0;
                    for v in vars {
                        let w = self.value(*v).ncols();
                        acc(&mut grads[v.0], g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).row(0).to_owned();
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let e = g.ncols() as f64;
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dxhat = &g.row(r) * &gv;
                        let xh = xhat.row(r);
                        let m1 = dxhat.sum() / e;
                        let m2 = (&dxhat * &xh).sum() / e;
                        let row = (&dxhat - m1 - &(&xh * m2)) * inv_std[r];
                        gx.row_mut(r).assign(&row);
                    }
                    acc(&mut grads[gain.0], ggain);
                    acc(&mut grads[bias.0], gbias);
                    acc(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, e) = qv.dim();
                    let dh = e / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros((n, e));
                    let mut gk = Array2::zeros((n, e));
                    let mut gvv = Array2::zeros((n, e));
                    let mut pi = 0;
                    for s0 in (0..n).step_by(*seq_len) {
                        let rows = s0..s0 + seq_len;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            gvv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vs.t());
                            let mut ds = p * &dp;
                            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let sum = row.sum();
                                Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * sum);
                            }
                            ds *= scale;
                            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                            gk.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.t().dot(&qs));
                        }
                    }
                    acc(&mut grads[q.0], gq);
                    acc(&mut grads[k.0], gk);
                    acc(&mut grads[v.0], gvv);
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    weights,
                    norm,
                    probs,
                } => {
                    let g0 = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let c = if *norm > 0.0 { g0 * w / norm } else { 0.0 };
                        let mut row = gl.row_mut(r);
                        row[t] -= 1.0;
                        row *= c;
                    }
                    acc(&mut grads[logits.0], gl);
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                    norm,
                } => {
                    let g0 = g[[0, 0]];
                    let mut gp = self.value(*pred) - target;
                    for (r, &w) in weights.iter().enumerate() {
                        let c = if *norm > 0.0 { 2.0 * g0 * w / norm } else { 0.0 };
                        let mut row = gp.row_mut(r);
                        row *= c;
                    }
                    acc(&mut grads[pred.0], gp);
                }
                Op::ChannelMix {
                    x,
                    w,
                    channels,
                    seq_len,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, f) = xv.dim();
                    let block = *seq_len;
                    let mut gx = Array2::zeros((n, f));
                    let mut gw = Array2::zeros((*channels, *channels));
                    for b0 in (0..n).step_by(block * channels) {
                        let rows = b0..b0 + block * channels;
                        let xr = xv
                            .slice(s![rows.clone(), ..])
                            .to_owned()
                            .into_shape_with_order((*channels, block * f))
                            .unwrap();
                        let gr = g
                            .slice(s![rows.clone(), ..])
                            .to_owned()
                            .into_shape_with_order((*channels, block * f))
                            .unwrap();
                        let dx = wv.dot(&gr).into_shape_with_order((block * channels, f)).unwrap();
                        gx.slice_mut(s![rows, ..]).assign(&dx);
                        gw += &xr.dot(&gr.t());
                    }
                    acc(&mut grads[x.0], gx);
                    acc(&mut grads[w.0], gw);
                }
            }
        }
        Gradients { grads: param_grads }
    }

    fn own(&self, i: usize) -> &Array2<f64> {
        match &self.nodes[i].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.params.get(*id),
        }
    }
}

/// Channel mixing on rows laid out (batch, channel, time); see [`Graph::channel_mix`].
pub(crate) fn mix_forward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    channels: usize,
    seq_len: usize,
) -> Array2<f64> {
    let (n, f) = x.dim();
    let block = seq_len;
    let mut out = Array2::zeros((n, f));
    for b0 in (0..n).step_by(block * channels) {
        let rows = b0..b0 + block * channels;
        let xr = x
            .slice(s![rows.clone(), ..])
            .to_owned()
            .into_shape_with_order((channels, block * f))
            .unwrap();
        let y = w.t().dot(&xr).into_shape_with_order((block * channels, f)).unwrap();
        out.slice_mut(s![rows, ..]).assign(&y);
    }
    out
}

fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(s) => *s += &g,
        None => *slot = Some(g),
    }
}

//! Post-norm causal transformer blocks shared by both GPT variants.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::nn::{layer_norm_rows, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Transformer {
    blocks: Vec<Block>,
    pub heads: usize,
    pub width: usize,
}

fn linear<R: Rng>(p: &mut ParamStore, name: &str, shape: (usize, usize), rng: &mut R) -> (ParamId, ParamId) {
    (
        p.add_normal(format!("{name}.w"), shape, 0.02, rng),
        p.add_const(format!("{name}.b"), (1, shape.1), 0.0),
    )
}

fn norm(p: &mut ParamStore, name: &str, e: usize) -> (ParamId, ParamId) {
    (
        p.add_const(format!("{name}.gain"), (1, e), 1.0),
        p.add_const(format!("{name}.bias"), (1, e), 0.0),
    )
}

impl Transformer {
    pub fn new<R: Rng>(p: &mut ParamStore, prefix: &str, layers: usize, heads: usize, e: usize, rng: &mut R) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.block{l}.{s}");
                Block {
                    wq: linear(p, &n("attn.q"), (e, e), rng),
                    wk: linear(p, &n("attn.k"), (e, e), rng),
                    wv: linear(p, &n("attn.v"), (e, e), rng),
                    wo: linear(p, &n("attn.out"), (e, e), rng),
                    ln1: norm(p, &n("ln1"), e),
                    ff1: linear(p, &n("ffn.in"), (e, 4 * e), rng),
                    ff2: linear(p, &n("ffn.out"), (4 * e, e), rng),
                    ln2: norm(p, &n("ln2"), e),
                }
            })
            .collect();
        Self {
            blocks,
            heads,
            width: e,
        }
    }

    /// Z = LN(H + MHA(H)); H' = LN(Z + FFN(Z)) for every block, on sequences of `seq_len` rows.
    pub fn forward(&self, g: &mut Graph, mut h: Var, seq_len: usize) -> Var {
        let lin = |g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(x, w);
            g.add_bias(y, b)
        };
        for blk in &self.blocks {
            let q = lin(g, h, blk.wq);
            let k = lin(g, h, blk.wk);
            let v = lin(g, h, blk.wv);
            let a = g.attention(q, k, v, seq_len, self.heads);
            let a = lin(g, a, blk.wo);
            let r = g.add(h, a);
            let (gn, bn) = (g.param(blk.ln1.0), g.param(blk.ln1.1));
            let z = g.layer_norm(r, gn, bn);
            let f = lin(g, z, blk.ff1);
            let f = g.gelu(f);
            let f = lin(g, f, blk.ff2);
            let r = g.add(z, f);
            let (gn, bn) = (g.param(blk.ln2.0), g.param(blk.ln2.1));
            h = g.layer_norm(r, gn, bn);
        }
        h
    }

    pub fn cache(&self, streams: usize, capacity: usize) -> KvCache {
        KvCache {
            k: (0..self.blocks.len()).map(|_| Array3::zeros((streams, capacity, self.width))).collect(),
            v: (0..self.blocks.len()).map(|_| Array3::zeros((streams, capacity, self.width))).collect(),
            len: 0,
        }
    }

    /// Appends one position per stream (`x` is streams × E) and returns the final hidden rows.
    pub fn step(&self, p: &ParamStore, cache: &mut KvCache, x: Array2<f64>) -> Array2<f64> {
        let pos = cache.len;
        assert!(pos < cache.capacity(), "cache full");
        let lin = |x: &Array2<f64>, (w, b): (ParamId, ParamId)| x.dot(p.get(w)) + &p.get(b).row(0);
        let ln = |x: Array2<f64>, (gn, bn): (ParamId, ParamId)| {
            let (xh, _) = layer_norm_rows(x.view());
            xh * &p.get(gn).row(0) + &p.get(bn).row(0)
        };
        let mut h = x;
        let streams = h.nrows();
        for (l, blk) in self.blocks.iter().enumerate() {
            let q = lin(&h, blk.wq);
            let k = lin(&h, blk.wk);
            let v = lin(&h, blk.wv);
            cache.k[l].slice_mut(s![.., pos, ..]).assign(&k);
            cache.v[l].slice_mut(s![.., pos, ..]).assign(&v);
            let mut a = Array2::zeros((streams, self.width));
            let dh = self.width / self.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            for st in 0..streams {
                let kk = cache.k[l].index_axis(Axis(0), st);
                let vv = cache.v[l].index_axis(Axis(0), st);
                for hd in 0..self.heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qh = q.slice(s![st, cols.clone()]);
                    let kh = kk.slice(s![..=pos, cols.clone()]);
                    let mut w = kh.dot(&qh) * scale;
                    let m = w.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    w.mapv_inplace(|x| (x - m).exp());
                    w /= w.sum();
                    let o = vv.slice(s![..=pos, cols.clone()]).t().dot(&w);
                    a.slice_mut(s![st, cols]).assign(&o);
                }
            }
            let a = lin(&a, blk.wo);
            let z = ln(h + a, blk.ln1);
            let f = lin(&z, blk.ff1).mapv(gelu);
            let f = lin(&f, blk.ff2);
            h = ln(z + f, blk.ln2);
        }
        cache.len += 1;
        h
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

/// Cached keys and values per block, streams × capacity × E.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<Array3<f64>>,
    v: Vec<Array3<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn capacity(&self) -> usize {
        self.k.first().map_or(0, |k| k.len_of(Axis(1)))
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }
}

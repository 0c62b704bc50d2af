use std::collections::VecDeque;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec_text::{KvReader, KvWriter};
use super::{check_batch, check_window, drop_last, target_rows, LabelSpace, TokenModel, Window};
use crate::error::{Error, Result};
use crate::nn::{mix_forward, Graph, ParamId, ParamStore, Var};

/// Channel-as-batch Wavenet with per-channel input embeddings, optional
/// label conditioning and optional cross-channel mixing of the skip sum.
#[derive(Debug, Clone, PartialEq)]
pub struct WavenetSpec {
    pub n_channels: usize,
    pub vocab: usize,
    /// Embedding size, which is also the residual width.
    pub hidden: usize,
    pub skip: usize,
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub n_conditions: usize,
    pub condition_embed: usize,
    pub n_subjects: usize,
    pub subject_embed: usize,
    pub mix: bool,
}

impl WavenetSpec {
    /// Full-size configuration: 2 stacks of 7 layers, 256 hidden, 1024 skip, 20-d condition embedding.
    pub fn new(n_channels: usize, vocab: usize, n_conditions: usize) -> Self {
        Self {
            n_channels,
            vocab,
            hidden: 256,
            skip: 1024,
            stacks: 2,
            layers_per_stack: 7,
            n_conditions,
            condition_embed: 20,
            n_subjects: 1,
            subject_embed: 0,
            mix: false,
        }
    }

    /// Mixing variant sizes: 128 hidden, 512 skip.
    pub fn new_mix(n_channels: usize, vocab: usize, n_conditions: usize) -> Self {
        Self {
            hidden: 128,
            skip: 512,
            mix: true,
            ..Self::new(n_channels, vocab, n_conditions)
        }
    }

    /// Kernel size 2: 1 + stacks · (2^layers − 1).
    pub fn receptive_field(&self) -> usize {
        1 + self.stacks * ((1usize << self.layers_per_stack) - 1)
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.stacks)
            .flat_map(|_| (0..self.layers_per_stack).map(|i| 1usize << i))
            .collect()
    }

    fn cond_width(&self) -> usize {
        self.cond_dim() + self.subj_dim()
    }

    fn cond_dim(&self) -> usize {
        if self.n_conditions > 0 {
            self.condition_embed
        } else {
            0
        }
    }

    fn subj_dim(&self) -> usize {
        self.subject_embed
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            n_conditions: self.n_conditions,
            n_subjects: self.n_subjects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_channels,
            self.vocab,
            self.hidden,
            self.skip,
            self.stacks,
            self.layers_per_stack,
            self.n_subjects,
        ];
        if sizes.iter().any(|&v| v == 0) {
            return Err(Error::invalid("wavenet sizes must all be at least 1"));
        }
        if self.layers_per_stack > 20 {
            return Err(Error::invalid("too many layers per stack"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KvWriter::new("wavenet")
            .put("n_channels", self.n_channels)
            .put("vocab", self.vocab)
            .put("hidden", self.hidden)
            .put("skip", self.skip)
            .put("stacks", self.stacks)
            .put("layers_per_stack", self.layers_per_stack)
            .put("n_conditions", self.n_conditions)
            .put("condition_embed", self.condition_embed)
            .put("n_subjects", self.n_subjects)
            .put("subject_embed", self.subject_embed)
            .put("mix", self.mix)
            .finish()
    }

    pub(crate) fn from_kv(kv: &KvReader) -> Result<Self> {
        Ok(Self {
            n_channels: kv.get("n_channels")?,
            vocab: kv.get("vocab")?,
            hidden: kv.get("hidden")?,
            skip: kv.get("skip")?,
            stacks: kv.get("stacks")?,
            layers_per_stack: kv.get("layers_per_stack")?,
            n_conditions: kv.get("n_conditions")?,
            condition_embed: kv.get("condition_embed")?,
            n_subjects: kv.get("n_subjects")?,
            subject_embed: kv.get("subject_embed")?,
            mix: kv.get("mix")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    dilation: usize,
    wf: ParamId,
    bf: ParamId,
    wg: ParamId,
    bg: ParamId,
    wc: Option<ParamId>,
    res: Option<(ParamId, ParamId)>,
    ws: ParamId,
    bs: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wavenet {
    pub spec: WavenetSpec,
    pub params: ParamStore,
    embed: ParamId,
    cond_table: Option<ParamId>,
    subj_table: Option<ParamId>,
    layers: Vec<LayerIds>,
    mix: Option<ParamId>,
    head1: (ParamId, ParamId),
    head2: (ParamId, ParamId),
}

impl Wavenet {
    pub fn new(spec: WavenetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (c, q, r, sk) = (spec.n_channels, spec.vocab, spec.hidden, spec.skip);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = p.add_normal("wn.embed", (c * q, r), 1.0, &mut rng);
        let cond_table = (spec.cond_dim() > 0)
            .then(|| p.add_normal("wn.cond_embed", (spec.n_conditions, spec.cond_dim()), 1.0, &mut rng));
        let subj_table = (spec.subj_dim() > 0)
            .then(|| p.add_normal("wn.subject_embed", (spec.n_subjects, spec.subj_dim()), 1.0, &mut rng));
        let ec = spec.cond_width();
        let dil = spec.dilations();
        let n_layers = dil.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, &d) in dil.iter().enumerate() {
            let name = |s: &str| format!("wn.layer{l}.{s}");
            let wf = p.add_normal(name("filter.w"), (2 * r, r), fan(2 * r), &mut rng);
            let bf = p.add_const(name("filter.b"), (1, r), 0.0);
            let wg = p.add_normal(name("gate.w"), (2 * r, r), fan(2 * r), &mut rng);
            let bg = p.add_const(name("gate.b"), (1, r), 0.0);
            let wc = (ec > 0).then(|| p.add_normal(name("cond.w"), (ec, r), fan(ec), &mut rng));
            let res = (l + 1 < n_layers).then(|| {
                (
                    p.add_normal(name("residual.w"), (r, r), fan(r), &mut rng),
                    p.add_const(name("residual.b"), (1, r), 0.0),
                )
            });
            let ws = p.add_normal(name("skip.w"), (r, sk), fan(r), &mut rng);
            let bs = p.add_const(name("skip.b"), (1, sk), 0.0);
            layers.push(LayerIds {
                dilation: d,
                wf,
                bf,
                wg,
                bg,
                wc,
                res,
                ws,
                bs,
            });
        }
        let mix = spec.mix.then(|| p.add("wn.mix", Array2::eye(c)));
        let head1 = (
            p.add_normal("wn.head1.w", (sk, sk), fan(sk), &mut rng),
            p.add_const("wn.head1.b", (1, sk), 0.0),
        );
        let head2 = (
            p.add_normal("wn.head2.w", (sk, q), fan(sk), &mut rng),
            p.add_const("wn.head2.b", (1, q), 0.0),
        );
        Ok(Self {
            spec,
            params: p,
            embed,
            cond_table,
            subj_table,
            layers,
            mix,
            head1,
            head2,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.spec.receptive_field()
    }

    /// Mixing matrix of the mix variant.
    pub fn mix_matrix(&self) -> Option<&Array2<f64>> {
        self.mix.map(|id| self.params.get(id))
    }

    pub fn mix_matrix_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.mix.map(|id| self.params.get_mut(id))
    }

    /// Logits for every input position, rows laid out (window, channel, time), `Q` columns.
    pub fn forward(&self, g: &mut Graph, batch: &[Window]) -> Result<Var> {
        let t = batch
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?
            .len();
        let c = self.spec.n_channels;
        let q = self.spec.vocab;
        let labels = self.spec.labels();
        let mut tok_idx = Vec::with_capacity(batch.len() * c * t);
        let mut cond_idx = Vec::with_capacity(batch.len() * t);
        let mut subj_idx = Vec::with_capacity(batch.len() * t);
        for w in batch {
            check_window(w, c, q)?;
            if w.len() != t {
                return Err(Error::shape("all windows in a batch must share a length"));
            }
            for ch in 0..c {
                tok_idx.extend(w.tokens.row(ch).iter().map(|&z| ch * q + z as usize));
            }
            for i in 0..t {
                cond_idx.push(labels.condition_row(w.condition[i])?);
                subj_idx.push(labels.subject_row(w.subject[i])?);
            }
        }
        let broadcast: Vec<usize> = (0..batch.len())
            .flat_map(|b| (0..c).flat_map(move |_| (0..t).map(move |i| b * t + i)))
            .collect();

        let emb = g.param(self.embed);
        let mut h = g.gather_all(emb, &tok_idx);
        let hc = self.condition_input(g, cond_idx, &subj_idx);
        let mut skips = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let past = g.causal_shift(h, t, layer.dilation);
            let x2 = g.concat_cols(&[past, h]);
            let wf = g.param(layer.wf);
            let bf = g.param(layer.bf);
            let wg = g.param(layer.wg);
            let bg = g.param(layer.bg);
            let mut a = g.matmul(x2, wf);
            a = g.add_bias(a, bf);
            let mut gt = g.matmul(x2, wg);
            gt = g.add_bias(gt, bg);
            if let (Some(hc), Some(wc)) = (hc, layer.wc) {
                let wc = g.param(wc);
                let proj = g.matmul(hc, wc);
                let proj = g.gather_all(proj, &broadcast);
                a = g.add(a, proj);
                gt = g.add(gt, proj);
            }
            let ta = g.tanh(a);
            let sg = g.sigmoid(gt);
            let z = g.mul(ta, sg);
            let ws = g.param(layer.ws);
            let bs = g.param(layer.bs);
            let sk = g.matmul(z, ws);
            skips.push(g.add_bias(sk, bs));
            if let Some((wr, br)) = layer.res {
                let wr = g.param(wr);
                let br = g.param(br);
                let r = g.matmul(z, wr);
                let r = g.add_bias(r, br);
                h = g.add(h, r);
            }
        }
        let mut s = g.add_all(&skips);
        if let Some(m) = self.mix {
            let m = g.param(m);
            s = g.channel_mix(s, m, c, t);
        }
        let s = g.relu(s);
        let (w1, b1) = (g.param(self.head1.0), g.param(self.head1.1));
        let y = g.matmul(s, w1);
        let y = g.add_bias(y, b1);
        let y = g.relu(y);
        let (w2, b2) = (g.param(self.head2.0), g.param(self.head2.1));
        let y = g.matmul(y, w2);
        Ok(g.add_bias(y, b2))
    }

    fn condition_input(&self, g: &mut Graph, cond: Vec<Option<usize>>, subj: &[usize]) -> Option<Var> {
        let mut parts = Vec::new();
        if let Some(t) = self.cond_table {
            let t = g.param(t);
            parts.push(g.gather(t, cond));
        }
        if let Some(t) = self.subj_table {
            let t = g.param(t);
            parts.push(g.gather_all(t, subj));
        }
        match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_cols(&parts)),
        }
    }

    /// Empty incremental state for sampling one step at a time.
    pub fn state(&self) -> WavenetState {
        WavenetState {
            queues: self.layers.iter().map(|l| VecDeque::with_capacity(l.dilation)).collect(),
        }
    }

    /// Consumes one sample per channel and returns `C × Q` logits for the next sample.
    pub fn step(&self, state: &mut WavenetState, tokens: &[u32], condition: u32, subject: u32) -> Result<Array2<f64>> {
        let c = self.spec.n_channels;
        let q = self.spec.vocab;
        if tokens.len() != c {
            return Err(Error::shape("one token per channel required"));
        }
        if let Some(&z) = tokens.iter().find(|&&z| z as usize >= q) {
            return Err(Error::OutOfRange(format!("token {z} outside vocabulary {q}")));
        }
        let labels = self.spec.labels();
        let crow = labels.condition_row(condition)?;
        let srow = labels.subject_row(subject)?;
        let p = &self.params;
        let rows: Vec<usize> = tokens.iter().enumerate().map(|(ch, &z)| ch * q + z as usize).collect();
        let mut h = p.get(self.embed).select(Axis(0), &rows);
        let mut hc: Vec<f64> = Vec::new();
        if let Some(t) = self.cond_table {
            match crow {
                Some(r) => hc.extend(p.get(t).row(r).iter()),
                None => hc.extend(std::iter::repeat(0.0).take(p.get(t).ncols())),
            }
        }
        if let Some(t) = self.subj_table {
            hc.extend(p.get(t).row(srow).iter());
        }
        let hc = Array2::from_shape_vec((1, hc.len()), hc).unwrap();
        let mut s = Array2::zeros((c, self.spec.skip));
        let r = self.spec.hidden;
        for (layer, queue) in self.layers.iter().zip(state.queues.iter_mut()) {
            let past = if queue.len() == layer.dilation {
                queue.pop_front().unwrap()
            } else {
                Array2::zeros((c, r))
            };
            queue.push_back(h.clone());
            let wf = p.get(layer.wf);
            let wg = p.get(layer.wg);
            let mut a = past.dot(&wf.slice(s![..r, ..])) + h.dot(&wf.slice(s![r.., ..])) + &p.get(layer.bf).row(0);
            let mut gt = past.dot(&wg.slice(s![..r, ..])) + h.dot(&wg.slice(s![r.., ..])) + &p.get(layer.bg).row(0);
            if let Some(wc) = layer.wc {
                let proj = hc.dot(p.get(wc));
                a += &proj.row(0);
                gt += &proj.row(0);
            }
            let z = a.mapv(f64::tanh) * gt.mapv(|x| 1.0 / (1.0 + (-x).exp()));
            s = s + z.dot(p.get(layer.ws)) + &p.get(layer.bs).row(0);
            if let Some((wr, br)) = layer.res {
                h = h + z.dot(p.get(wr)) + &p.get(br).row(0);
            }
        }
        if let Some(m) = self.mix {
            s = mix_forward(s.view(), p.get(m).view(), c, 1);
        }
        let y = (s.mapv(|v| v.max(0.0)).dot(p.get(self.head1.0)) + &p.get(self.head1.1).row(0)).mapv(|v| v.max(0.0));
        Ok(y.dot(p.get(self.head2.0)) + &p.get(self.head2.1).row(0))
    }
}

/// Per-layer queues of past layer inputs, one entry per step up to the dilation.
#[derive(Debug, Clone)]
pub struct WavenetState {
    queues: Vec<VecDeque<Array2<f64>>>,
}

impl TokenModel for Wavenet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn n_streams(&self) -> usize {
        self.spec.n_channels
    }

    fn loss(&self, g: &mut Graph, batch: &[Window], min_ctx: usize) -> Result<Var> {
        let len = check_batch(batch)?;
        for w in batch {
            check_window(w, self.spec.n_channels, self.spec.vocab)?;
        }
        let logits = self.forward(g, &drop_last(batch, len))?;
        let (targets, weights, norm) = target_rows(batch, min_ctx);
        Ok(g.softmax_ce(logits, targets, weights, norm))
    }
}

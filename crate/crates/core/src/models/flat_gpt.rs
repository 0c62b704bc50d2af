use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec_text::{KvReader, KvWriter};
use super::transformer::{KvCache, Transformer};
use super::{check_batch, check_window, LabelSpace, Window};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::tokenize::flatten;

/// Transformer over bucket tokens flattened as `sep, z_1 .. z_B` per timestep.
///
/// Token ids in the embedding table are `b · V + z`, with the separator at `B · V`.
/// Context bounds are counted in timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGptSpec {
    pub n_buckets: usize,
    /// Codes per bucket.
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub min_ctx: usize,
    pub max_ctx: usize,
    pub n_conditions: usize,
    pub n_subjects: usize,
    pub use_condition_embedding: bool,
}

impl FlatGptSpec {
    pub fn new(n_buckets: usize, vocab: usize, n_conditions: usize) -> Self {
        Self {
            n_buckets,
            vocab,
            layers: 12,
            heads: 12,
            embed: 96,
            min_ctx: 128,
            max_ctx: 256,
            n_conditions,
            n_subjects: 1,
            use_condition_embedding: true,
        }
    }

    pub fn separator(&self) -> u32 {
        (self.n_buckets * self.vocab) as u32
    }

    /// Flat positions covering `steps` timesteps.
    pub fn flat_len(&self, steps: usize) -> usize {
        steps * (self.n_buckets + 1)
    }

    /// Longest flat input: one window of `max_ctx + 1` steps minus its final token.
    pub fn max_flat_input(&self) -> usize {
        self.flat_len(self.max_ctx + 1) - 1
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            n_conditions: self.n_conditions,
            n_subjects: self.n_subjects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_buckets, self.vocab, self.layers, self.heads, self.embed, self.n_subjects]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("transformer sizes must all be at least 1"));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::invalid("embedding size must be divisible by the head count"));
        }
        if !(1 <= self.min_ctx && self.min_ctx <= self.max_ctx) {
            return Err(Error::invalid("context range must satisfy 1 ≤ min ≤ max"));
        }
        if self.n_buckets.checked_mul(self.vocab).map_or(true, |v| v >= u32::MAX as usize) {
            return Err(Error::invalid("flat vocabulary too large"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KvWriter::new("flat_gpt2")
            .put("n_buckets", self.n_buckets)
            .put("vocab", self.vocab)
            .put("layers", self.layers)
            .put("heads", self.heads)
            .put("embed", self.embed)
            .put("min_ctx", self.min_ctx)
            .put("max_ctx", self.max_ctx)
            .put("n_conditions", self.n_conditions)
            .put("n_subjects", self.n_subjects)
            .put("use_condition_embedding", self.use_condition_embedding)
            .finish()
    }

    pub(crate) fn from_kv(kv: &KvReader) -> Result<Self> {
        Ok(Self {
            n_buckets: kv.get("n_buckets")?,
            vocab: kv.get("vocab")?,
            layers: kv.get("layers")?,
            heads: kv.get("heads")?,
            embed: kv.get("embed")?,
            min_ctx: kv.get("min_ctx")?,
            max_ctx: kv.get("max_ctx")?,
            n_conditions: kv.get("n_conditions")?,
            n_subjects: kv.get("n_subjects")?,
            use_condition_embedding: kv.get("use_condition_embedding")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatGpt {
    pub spec: FlatGptSpec,
    pub params: ParamStore,
    token: ParamId,
    position: ParamId,
    timestep: ParamId,
    bucket: ParamId,
    condition: Option<ParamId>,
    subject: ParamId,
    body: Transformer,
    heads: Vec<(ParamId, ParamId)>,
}

/// Flat layout of one position: (flat token id, bucket row, timestep).
fn layout(spec: &FlatGptSpec, tokens: &Array2<u32>) -> Vec<(usize, usize, usize)> {
    let b = spec.n_buckets;
    let sep = spec.separator();
    let offset: Array2<u32> = Array2::from_shape_fn(tokens.dim(), |(r, t)| r as u32 * spec.vocab as u32 + tokens[[r, t]]);
    flatten(offset.view(), sep)
        .into_iter()
        .enumerate()
        .map(|(p, z)| {
            let k = p % (b + 1);
            (z as usize, if k == 0 { b } else { k - 1 }, p / (b + 1))
        })
        .collect()
}

/// (input position, target bucket, target code) for every scored prediction of a window.
/// The input at position p predicts flat token p + 1; separators are never targets.
pub(crate) fn flat_targets(n_buckets: usize, tokens: &Array2<u32>, n_inputs: usize, min_ctx: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for p in 0..n_inputs {
        let q = p + 1;
        let k = q % (n_buckets + 1);
        let step = q / (n_buckets + 1);
        if k == 0 || step < min_ctx {
            continue;
        }
        out.push((p, k - 1, tokens[[k - 1, step]] as usize));
    }
    out
}

impl FlatGpt {
    pub fn new(spec: FlatGptSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = spec.embed;
        let (b, v) = (spec.n_buckets, spec.vocab);
        let token = p.add_normal("flat.token_embed", (b * v + 1, e), 0.02, &mut rng);
        let position = p.add_normal("flat.position_embed", (spec.max_flat_input(), e), 0.02, &mut rng);
        let timestep = p.add_normal("flat.timestep_embed", (spec.max_ctx + 1, e), 0.02, &mut rng);
        let bucket = p.add_normal("flat.bucket_embed", (b + 1, e), 0.02, &mut rng);
        let condition = (spec.n_conditions > 0)
            .then(|| p.add_normal("flat.condition_embed", (spec.n_conditions, e), 0.02, &mut rng));
        let subject = p.add_normal("flat.subject_embed", (spec.n_subjects, e), 0.02, &mut rng);
        let body = Transformer::new(&mut p, "flat", spec.layers, spec.heads, e, &mut rng);
        let heads = (0..b)
            .map(|i| {
                (
                    p.add_normal(format!("flat.head{i}.w"), (e, v), 0.02, &mut rng),
                    p.add_const(format!("flat.head{i}.b"), (1, v), 0.0),
                )
            })
            .collect();
        Ok(Self {
            spec,
            params: p,
            token,
            position,
            timestep,
            bucket,
            condition,
            subject,
            body,
            heads,
        })
    }

    /// Final hidden rows for the flattened inputs of each window, dropping the last flat token.
    /// Rows are laid out (window, flat position).
    pub fn hidden(&self, g: &mut Graph, batch: &[Window]) -> Result<(Var, usize)> {
        let steps = check_batch(batch)?;
        if steps > self.spec.max_ctx + 1 {
            return Err(Error::invalid(format!(
                "window of {steps} steps exceeds the context of {} + 1",
                self.spec.max_ctx
            )));
        }
        let n = self.spec.flat_len(steps) - 1;
        let labels = self.spec.labels();
        let (mut tok, mut pos, mut ts, mut bk, mut cond, mut subj) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for w in batch {
            check_window(w, self.spec.n_buckets, self.spec.vocab)?;
            let lay = layout(&self.spec, &w.tokens);
            for (p, &(z, b, t)) in lay.iter().take(n).enumerate() {
                tok.push(z);
                pos.push(p);
                ts.push(t);
                bk.push(b);
                cond.push(labels.condition_row(w.condition[t])?);
                subj.push(labels.subject_row(w.subject[t])?);
            }
        }
        let mut parts = Vec::with_capacity(6);
        for (table, idx) in [(self.token, tok), (self.position, pos), (self.timestep, ts), (self.bucket, bk), (self.subject, subj)] {
            let t = g.param(table);
            parts.push(g.gather_all(t, &idx));
        }
        if let (Some(ce), true) = (self.condition, self.spec.use_condition_embedding) {
            let ce = g.param(ce);
            parts.push(g.gather(ce, cond));
        }
        let h0 = g.add_all(&parts);
        Ok((self.body.forward(g, h0, n), n))
    }

    /// Cross-entropy restricted to the target bucket's codes. Separator targets are skipped,
    /// as are targets in timesteps before `min_ctx`.
    pub fn loss(&self, g: &mut Graph, batch: &[Window], min_ctx: usize) -> Result<Var> {
        let (h, n) = self.hidden(g, batch)?;
        let bsz = self.spec.n_buckets;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); bsz];
        let mut targets: Vec<Vec<usize>> = vec![Vec::new(); bsz];
        for (wi, w) in batch.iter().enumerate() {
            for (p, b, z) in flat_targets(bsz, &w.tokens, n, min_ctx) {
                rows[b].push(wi * n + p);
                targets[b].push(z);
            }
        }
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut losses = Vec::new();
        for (b, (r, t)) in rows.into_iter().zip(targets).enumerate() {
            if r.is_empty() {
                continue;
            }
            let hb = g.gather_all(h, &r);
            let (w, bias) = (g.param(self.heads[b].0), g.param(self.heads[b].1));
            let lg = g.matmul(hb, w);
            let lg = g.add_bias(lg, bias);
            let m = r.len();
            losses.push(g.softmax_ce(lg, t, vec![1.0; m], total as f64));
        }
        if losses.is_empty() {
            return Err(Error::invalid("no targets past the minimum context"));
        }
        Ok(g.add_all(&losses))
    }

    /// Code logits of bucket `b` from one hidden row.
    pub fn bucket_logits(&self, hidden: &Array1<f64>, b: usize) -> Result<Array1<f64>> {
        let (w, bias) = *self
            .heads
            .get(b)
            .ok_or_else(|| Error::OutOfRange(format!("bucket {b} of {}", self.spec.n_buckets)))?;
        Ok(hidden.dot(self.params.get(w)) + &self.params.get(bias).row(0))
    }

    /// Softmax over the codes of bucket `b` only.
    pub fn bucket_distribution(&self, hidden: &Array1<f64>, b: usize) -> Result<Vec<f64>> {
        let mut l = self.bucket_logits(hidden, b)?.insert_axis(ndarray::Axis(0));
        crate::nn::softmax_rows(&mut l);
        Ok(l.into_raw_vec_and_offset().0)
    }

    pub fn state(&self) -> FlatGptState {
        FlatGptState {
            cache: self.body.cache(1, self.spec.max_flat_input()),
            history: VecDeque::new(),
            current: Vec::new(),
            step_labels: (0, 1),
            steps_in_cache: 0,
        }
    }

    /// Starts a new timestep by feeding the separator. Returns the hidden row that predicts bucket 0.
    ///
    /// When the cache cannot hold another timestep it is rebuilt from the latest `min_ctx` steps.
    pub fn begin_step(&self, state: &mut FlatGptState, condition: u32, subject: u32) -> Result<Array1<f64>> {
        let nb = self.spec.n_buckets;
        if !state.current.is_empty() && state.current.len() != nb {
            return Err(Error::invalid("previous timestep is incomplete"));
        }
        let labels = self.spec.labels();
        labels.condition_row(condition)?;
        labels.subject_row(subject)?;
        let pending = state.current.len() == nb;
        let needed = nb + usize::from(pending);
        if state.cache.len() + needed > state.cache.capacity() {
            if pending {
                self.archive(state);
            }
            state.cache.clear();
            state.steps_in_cache = 0;
            while state.history.len() > self.spec.min_ctx {
                state.history.pop_front();
            }
            let replay: Vec<_> = state.history.iter().cloned().collect();
            for (codes, (y, o)) in &replay {
                let step = state.steps_in_cache;
                self.feed(state, self.spec.separator() as usize, nb, step, *y, *o)?;
                for (b, &z) in codes.iter().enumerate() {
                    self.feed(state, b * self.spec.vocab + z as usize, b, step, *y, *o)?;
                }
                state.steps_in_cache += 1;
            }
        } else if pending {
            let (y, o) = state.step_labels;
            let last = *state.current.last().unwrap();
            let step = state.steps_in_cache - 1;
            self.feed(state, (nb - 1) * self.spec.vocab + last as usize, nb - 1, step, y, o)?;
            self.archive(state);
        }
        state.step_labels = (condition, subject);
        let step = state.steps_in_cache;
        let h = self.feed(state, self.spec.separator() as usize, nb, step, condition, subject)?;
        state.steps_in_cache += 1;
        Ok(h)
    }

    fn archive(&self, state: &mut FlatGptState) {
        let done = std::mem::take(&mut state.current);
        state.history.push_back((done, state.step_labels));
        while state.history.len() > self.spec.max_ctx {
            state.history.pop_front();
        }
    }

    /// Records the sampled code of the next bucket and returns the hidden row predicting the
    /// following bucket. The last code of a timestep is only fed when the next one begins, so
    /// `None` is returned for it.
    pub fn push_code(&self, state: &mut FlatGptState, code: u32) -> Result<Option<Array1<f64>>> {
        let b = state.current.len();
        let nb = self.spec.n_buckets;
        if b >= nb || state.steps_in_cache == 0 {
            return Err(Error::invalid("no open timestep to add a code to"));
        }
        if code as usize >= self.spec.vocab {
            return Err(Error::OutOfRange(format!("code {code} outside vocabulary {}", self.spec.vocab)));
        }
        state.current.push(code);
        if b + 1 == nb {
            return Ok(None);
        }
        let (y, o) = state.step_labels;
        let step = state.steps_in_cache - 1;
        Ok(Some(self.feed(state, b * self.spec.vocab + code as usize, b, step, y, o)?))
    }

    fn feed(&self, state: &mut FlatGptState, token: usize, bucket: usize, step: usize, y: u32, o: u32) -> Result<Array1<f64>> {
        let p = &self.params;
        let labels = self.spec.labels();
        let pos = state.cache.len();
        let mut x = p.get(self.token).row(token).to_owned();
        x += &p.get(self.position).row(pos);
        x += &p.get(self.timestep).row(step);
        x += &p.get(self.bucket).row(bucket);
        x += &p.get(self.subject).row(labels.subject_row(o)?);
        if let (Some(ce), true, Some(r)) = (self.condition, self.spec.use_condition_embedding, labels.condition_row(y)?) {
            x += &p.get(ce).row(r);
        }
        let h = self.body.step(p, &mut state.cache, x.insert_axis(ndarray::Axis(0)));
        Ok(h.row(0).to_owned())
    }
}

/// Incremental state over the flat sequence.
#[derive(Debug, Clone)]
pub struct FlatGptState {
    cache: KvCache,
    history: VecDeque<(Vec<u32>, (u32, u32))>,
    current: Vec<u32>,
    step_labels: (u32, u32),
    steps_in_cache: usize,
}

impl super::TokenModel for FlatGpt {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn n_streams(&self) -> usize {
        self.spec.n_buckets
    }

    fn loss(&self, g: &mut Graph, batch: &[Window], min_ctx: usize) -> Result<Var> {
        FlatGpt::loss(self, g, batch, min_ctx)
    }
}

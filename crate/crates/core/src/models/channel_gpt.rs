use std::collections::VecDeque;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec_text::{KvReader, KvWriter};
use super::transformer::{KvCache, Transformer};
use super::{check_batch, check_window, drop_last, target_rows, LabelSpace, TokenModel, Window};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};

/// Channel-as-batch causal transformer over mu-law tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GptSpec {
    pub n_channels: usize,
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub min_ctx: usize,
    pub max_ctx: usize,
    pub n_conditions: usize,
    pub n_subjects: usize,
    /// Output projection is the transposed token table.
    pub tie_weights: bool,
    pub use_channel_embedding: bool,
    pub use_condition_embedding: bool,
}

impl GptSpec {
    /// 12 layers, 12 heads, E = 96, context 128..=256, tied output.
    pub fn new(n_channels: usize, vocab: usize, n_conditions: usize) -> Self {
        Self {
            n_channels,
            vocab,
            layers: 12,
            heads: 12,
            embed: 96,
            min_ctx: 128,
            max_ctx: 256,
            n_conditions,
            n_subjects: 1,
            tie_weights: true,
            use_channel_embedding: true,
            use_condition_embedding: true,
        }
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            n_conditions: self.n_conditions,
            n_subjects: self.n_subjects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_channels, self.vocab, self.layers, self.heads, self.embed, self.n_subjects]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("transformer sizes must all be at least 1"));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embedding size {} is not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if !(1 <= self.min_ctx && self.min_ctx <= self.max_ctx) {
            return Err(Error::invalid("context range must satisfy 1 ≤ min ≤ max"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KvWriter::new("channel_gpt2")
            .put("n_channels", self.n_channels)
            .put("vocab", self.vocab)
            .put("layers", self.layers)
            .put("heads", self.heads)
            .put("embed", self.embed)
            .put("min_ctx", self.min_ctx)
            .put("max_ctx", self.max_ctx)
            .put("n_conditions", self.n_conditions)
            .put("n_subjects", self.n_subjects)
            .put("tie_weights", self.tie_weights)
            .put("use_channel_embedding", self.use_channel_embedding)
            .put("use_condition_embedding", self.use_condition_embedding)
            .finish()
    }

    pub(crate) fn from_kv(kv: &KvReader) -> Result<Self> {
        Ok(Self {
            n_channels: kv.get("n_channels")?,
            vocab: kv.get("vocab")?,
            layers: kv.get("layers")?,
            heads: kv.get("heads")?,
            embed: kv.get("embed")?,
            min_ctx: kv.get("min_ctx")?,
            max_ctx: kv.get("max_ctx")?,
            n_conditions: kv.get("n_conditions")?,
            n_subjects: kv.get("n_subjects")?,
            tie_weights: kv.get("tie_weights")?,
            use_channel_embedding: kv.get("use_channel_embedding")?,
            use_condition_embedding: kv.get("use_condition_embedding")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGpt {
    pub spec: GptSpec,
    pub params: ParamStore,
    token: ParamId,
    position: ParamId,
    condition: Option<ParamId>,
    subject: ParamId,
    channel: ParamId,
    body: Transformer,
    output: Option<ParamId>,
}

impl ChannelGpt {
    pub fn new(spec: GptSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = spec.embed;
        let token = p.add_normal("gpt.token_embed", (spec.vocab, e), 0.02, &mut rng);
        let position = p.add_normal("gpt.position_embed", (spec.max_ctx, e), 0.02, &mut rng);
        let condition = (spec.n_conditions > 0)
            .then(|| p.add_normal("gpt.condition_embed", (spec.n_conditions, e), 0.02, &mut rng));
        let subject = p.add_normal("gpt.subject_embed", (spec.n_subjects, e), 0.02, &mut rng);
        let channel = p.add_normal("gpt.channel_embed", (spec.n_channels, e), 0.02, &mut rng);
        let body = Transformer::new(&mut p, "gpt", spec.layers, spec.heads, e, &mut rng);
        let output = (!spec.tie_weights).then(|| p.add_normal("gpt.output", (spec.vocab, e), 0.02, &mut rng));
        Ok(Self {
            spec,
            params: p,
            token,
            position,
            condition,
            subject,
            channel,
            body,
            output,
        })
    }

    /// Token embedding table, also the output projection when tied.
    pub fn token_table(&self) -> &Array2<f64> {
        self.params.get(self.token)
    }

    pub fn token_table_mut(&mut self) -> &mut Array2<f64> {
        self.params.get_mut(self.token)
    }

    pub fn channel_table(&self) -> &Array2<f64> {
        self.params.get(self.channel)
    }

    pub fn channel_table_mut(&mut self) -> &mut Array2<f64> {
        self.params.get_mut(self.channel)
    }

    pub fn channel_param(&self) -> ParamId {
        self.channel
    }

    pub fn condition_param(&self) -> Option<ParamId> {
        self.condition
    }

    fn output_param(&self) -> ParamId {
        self.output.unwrap_or(self.token)
    }

    /// Logits for every input position, rows laid out (window, channel, time).
    pub fn forward(&self, g: &mut Graph, batch: &[Window]) -> Result<Var> {
        let t = batch.first().ok_or_else(|| Error::invalid("empty batch"))?.len();
        if t == 0 || t > self.spec.max_ctx {
            return Err(Error::invalid(format!(
                "sequence length {t} outside 1..={}",
                self.spec.max_ctx
            )));
        }
        let c = self.spec.n_channels;
        let labels = self.spec.labels();
        let n = batch.len() * c * t;
        let (mut tok, mut pos, mut cond, mut subj, mut chan) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for w in batch {
            check_window(w, c, self.spec.vocab)?;
            if w.len() != t {
                return Err(Error::shape("all windows in a batch must share a length"));
            }
            let crow = w.condition.iter().map(|&y| labels.condition_row(y)).collect::<Result<Vec<_>>>()?;
            let srow = w.subject.iter().map(|&o| labels.subject_row(o)).collect::<Result<Vec<_>>>()?;
            for ch in 0..c {
                for i in 0..t {
                    tok.push(w.tokens[[ch, i]] as usize);
                    pos.push(i);
                    cond.push(crow[i]);
                    subj.push(srow[i]);
                    chan.push(ch);
                }
            }
        }
        let te = g.param(self.token);
        let mut h = g.gather_all(te, &tok);
        let pe = g.param(self.position);
        let pv = g.gather_all(pe, &pos);
        h = g.add(h, pv);
        if let (Some(ce), true) = (self.condition, self.spec.use_condition_embedding) {
            let ce = g.param(ce);
            let cv = g.gather(ce, cond);
            h = g.add(h, cv);
        }
        let se = g.param(self.subject);
        let sv = g.gather_all(se, &subj);
        h = g.add(h, sv);
        if self.spec.use_channel_embedding {
            let che = g.param(self.channel);
            let chv = g.gather_all(che, &chan);
            h = g.add(h, chv);
        }
        let h = self.body.forward(g, h, t);
        let out = g.param(self.output_param());
        Ok(g.matmul_bt(h, out))
    }

    /// Empty sampling state for all channels.
    pub fn state(&self) -> ChannelGptState {
        ChannelGptState {
            cache: self.body.cache(self.spec.n_channels, self.spec.max_ctx),
            history: VecDeque::with_capacity(self.spec.max_ctx),
        }
    }

    /// Consumes one token per channel and returns `C × Q` logits for the next sample.
    ///
    /// When the cache is full it is rebuilt from the latest `min_ctx − 1` steps, so the
    /// context seen at every prediction stays within the trained range.
    pub fn step(&self, state: &mut ChannelGptState, tokens: &[u32], condition: u32, subject: u32) -> Result<Array2<f64>> {
        if tokens.len() != self.spec.n_channels {
            return Err(Error::shape("one token per channel required"));
        }
        if let Some(&z) = tokens.iter().find(|&&z| z as usize >= self.spec.vocab) {
            return Err(Error::OutOfRange(format!("token {z} outside vocabulary {}", self.spec.vocab)));
        }
        let labels = self.spec.labels();
        labels.condition_row(condition)?;
        labels.subject_row(subject)?;
        if state.cache.len() == self.spec.max_ctx {
            state.cache.clear();
            let keep = self.spec.min_ctx.saturating_sub(1);
            while state.history.len() > keep {
                state.history.pop_front();
            }
            let replay: Vec<_> = state.history.iter().cloned().collect();
            for (tk, y, o) in &replay {
                self.advance(&mut state.cache, tk, *y, *o)?;
            }
        }
        let h = self.advance(&mut state.cache, tokens, condition, subject)?;
        if state.history.len() == self.spec.max_ctx {
            state.history.pop_front();
        }
        state.history.push_back((tokens.to_vec(), condition, subject));
        Ok(h.dot(&self.params.get(self.output_param()).t()))
    }

    fn advance(&self, cache: &mut KvCache, tokens: &[u32], condition: u32, subject: u32) -> Result<Array2<f64>> {
        let p = &self.params;
        let labels = self.spec.labels();
        let pos = cache.len();
        let rows: Vec<usize> = tokens.iter().map(|&z| z as usize).collect();
        let mut x = p.get(self.token).select(Axis(0), &rows);
        x += &p.get(self.position).row(pos);
        if let (Some(ce), true, Some(r)) = (self.condition, self.spec.use_condition_embedding, labels.condition_row(condition)?) {
            x += &p.get(ce).row(r);
        }
        x += &p.get(self.subject).row(labels.subject_row(subject)?);
        if self.spec.use_channel_embedding {
            x += &p.get(self.channel).slice(s![.., ..]);
        }
        Ok(self.body.step(p, cache, x))
    }
}

/// KV cache plus the recent inputs needed to rebuild it.
#[derive(Debug, Clone)]
pub struct ChannelGptState {
    cache: KvCache,
    history: VecDeque<(Vec<u32>, u32, u32)>,
}

impl ChannelGptState {
    pub fn cached_len(&self) -> usize {
        self.cache.len()
    }
}

impl TokenModel for ChannelGpt {
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

//! Forecasting architectures.
//!
//! Every neural model exposes a differentiable forward pass for training
//! (built on [`crate::nn::Graph`]) and a cached incremental pass for sampling.
//! The two are tested to agree.

mod ar;
mod channel_gpt;
mod flat_gpt;
pub(crate) mod spec_text;
mod transformer;
mod wavenet;

#[cfg(test)]
mod tests;

use ndarray::Array2;

pub use ar::{ArModel, ArSpec};
pub use channel_gpt::{ChannelGpt, ChannelGptState, GptSpec};
pub use flat_gpt::{FlatGpt, FlatGptSpec, FlatGptState};
pub(crate) use flat_gpt::flat_targets;
pub use wavenet::{Wavenet, WavenetSpec, WavenetState};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Var};
use spec_text::KvReader;

/// A training or evaluation window: token streams with their label tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Streams × samples.
    pub tokens: Array2<u32>,
    pub condition: Vec<u32>,
    pub subject: Vec<u32>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.ncols() == 0
    }

    pub fn n_streams(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Label table sizes shared by the conditioned models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    pub n_conditions: usize,
    pub n_subjects: usize,
}

impl LabelSpace {
    /// Row of the condition table; condition 0 has no row.
    pub fn condition_row(&self, c: u32) -> Result<Option<usize>> {
        match c {
            0 => Ok(None),
            c if c as usize <= self.n_conditions => Ok(Some(c as usize - 1)),
            c => Err(Error::UnknownLabel(format!(
                "condition {c} (model knows 1..={})",
                self.n_conditions
            ))),
        }
    }

    pub fn subject_row(&self, s: u32) -> Result<usize> {
        if s >= 1 && s as usize <= self.n_subjects {
            Ok(s as usize - 1)
        } else {
            Err(Error::UnknownLabel(format!(
                "subject {s} (model knows 1..={})",
                self.n_subjects
            )))
        }
    }
}

pub(crate) fn check_window(w: &Window, streams: usize, vocab: usize) -> Result<()> {
    if w.n_streams() != streams {
        return Err(Error::shape(format!(
            "window has {} streams, model expects {streams}",
            w.n_streams()
        )));
    }
    if w.condition.len() != w.len() || w.subject.len() != w.len() {
        return Err(Error::shape("label tracks must match the window length"));
    }
    if let Some(&q) = w.tokens.iter().find(|&&q| q as usize >= vocab) {
        return Err(Error::OutOfRange(format!("token {q} outside vocabulary {vocab}")));
    }
    Ok(())
}

pub(crate) fn check_batch(batch: &[Window]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if batch.iter().any(|w| w.len() != first.len()) {
        return Err(Error::shape("all windows in a batch must share a length"));
    }
    if first.len() < 2 {
        return Err(Error::invalid("windows need at least two samples"));
    }
    Ok(first.len())
}

/// Serialisable architecture description of any model family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Ar(ArSpec),
    Wavenet(WavenetSpec),
    ChannelGpt(GptSpec),
    FlatGpt(FlatGptSpec),
}

impl ModelSpec {
    pub fn to_text(&self) -> String {
        match self {
            ModelSpec::Ar(s) => s.to_text(),
            ModelSpec::Wavenet(s) => s.to_text(),
            ModelSpec::ChannelGpt(s) => s.to_text(),
            ModelSpec::FlatGpt(s) => s.to_text(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvReader::parse(text)?;
        match kv.kind()? {
            "ar" => Ok(ModelSpec::Ar(ArSpec::from_kv(&kv)?)),
            "wavenet" => Ok(ModelSpec::Wavenet(WavenetSpec::from_kv(&kv)?)),
            "channel_gpt2" => Ok(ModelSpec::ChannelGpt(GptSpec::from_kv(&kv)?)),
            "flat_gpt2" => Ok(ModelSpec::FlatGpt(FlatGptSpec::from_kv(&kv)?)),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Ar(_) => "ar",
            ModelSpec::Wavenet(s) if s.mix => "wavenet_mix",
            ModelSpec::Wavenet(_) => "wavenet",
            ModelSpec::ChannelGpt(_) => "channel_gpt2",
            ModelSpec::FlatGpt(_) => "flat_gpt2",
        }
    }
}

/// Any of the model families with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ar(ArModel),
    Wavenet(Wavenet),
    ChannelGpt(ChannelGpt),
    FlatGpt(FlatGpt),
}

impl Model {
    /// Freshly initialised model.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Ar(s) => Model::Ar(ArModel::new(s.clone())?),
            ModelSpec::Wavenet(s) => Model::Wavenet(Wavenet::new(s.clone(), seed)?),
            ModelSpec::ChannelGpt(s) => Model::ChannelGpt(ChannelGpt::new(s.clone(), seed)?),
            ModelSpec::FlatGpt(s) => Model::FlatGpt(FlatGpt::new(s.clone(), seed)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Ar(m) => ModelSpec::Ar(m.spec.clone()),
            Model::Wavenet(m) => ModelSpec::Wavenet(m.spec.clone()),
            Model::ChannelGpt(m) => ModelSpec::ChannelGpt(m.spec.clone()),
            Model::FlatGpt(m) => ModelSpec::FlatGpt(m.spec.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Ar(m) => &m.params,
            Model::Wavenet(m) => &m.params,
            Model::ChannelGpt(m) => &m.params,
            Model::FlatGpt(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Ar(m) => &mut m.params,
            Model::Wavenet(m) => &mut m.params,
            Model::ChannelGpt(m) => &mut m.params,
            Model::FlatGpt(m) => &mut m.params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().n_scalars()
    }

    /// The model as a next-token predictor; `None` for the AR baseline.
    pub fn as_token_model(&self) -> Option<&dyn TokenModel> {
        match self {
            Model::Ar(_) => None,
            Model::Wavenet(m) => Some(m),
            Model::ChannelGpt(m) => Some(m),
            Model::FlatGpt(m) => Some(m),
        }
    }

    /// Number of token streams (channels, or buckets for the flattened model).
    pub fn n_streams(&self) -> usize {
        match self {
            Model::Ar(m) => m.spec.n_channels,
            Model::Wavenet(m) => m.spec.n_channels,
            Model::ChannelGpt(m) => m.spec.n_channels,
            Model::FlatGpt(m) => m.spec.n_buckets,
        }
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match self {
            Model::Ar(_) => None,
            Model::Wavenet(m) => Some(m.spec.vocab),
            Model::ChannelGpt(m) => Some(m.spec.vocab),
            Model::FlatGpt(m) => Some(m.spec.vocab),
        }
    }
}

/// Models trained by next-token cross-entropy on [`Window`] batches.
pub trait TokenModel {
    fn params(&self) -> &ParamStore;

    /// Number of token streams per window.
    fn n_streams(&self) -> usize;

    /// Mean cross-entropy over targets whose index in the window is at least `min_ctx`.
    /// Input position t predicts sample t + 1.
    fn loss(&self, g: &mut Graph, batch: &[Window], min_ctx: usize) -> Result<Var>;
}

/// Row weights for next-token targets: rows laid out (window, stream, position).
pub(crate) fn target_rows(batch: &[Window], min_ctx: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let len = batch[0].len();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for w in batch {
        for s in 0..w.n_streams() {
            for t in 0..len - 1 {
                targets.push(w.tokens[[s, t + 1]] as usize);
                weights.push(if t + 1 >= min_ctx { 1.0 } else { 0.0 });
            }
        }
    }
    let norm = weights.iter().sum();
    (targets, weights, norm)
}

/// Windows without their final sample, used as model inputs.
pub(crate) fn drop_last(batch: &[Window], len: usize) -> Vec<Window> {
    batch
        .iter()
        .map(|w| Window {
            tokens: w.tokens.slice(ndarray::s![.., ..len - 1]).to_owned(),
            condition: w.condition[..len - 1].to_vec(),
            subject: w.subject[..len - 1].to_vec(),
        })
        .collect()
}

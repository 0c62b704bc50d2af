//! Recursive sampling from trained models and IIR simulation of the AR baseline.

mod sampling;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use sampling::{nucleus, sample_top_p, softmax, top_p_filter};

use crate::error::{Error, Result};
use crate::models::spec_text::KvWriter;
use crate::models::{ArModel, Model};
use crate::signal::{default_channel_names, Recording};
use crate::tokenize::{detokenize, Codec, TokenizedRecording};
use crate::training::Checkpoint;

/// Where the condition labels fed during generation come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSource {
    /// Replay a recorded track from its start; it must cover the whole duration.
    Track(Vec<u32>),
    /// Trials in shuffled blocks of every condition, with the given timing.
    Schedule {
        n_conditions: u32,
        trial_duration_s: f64,
        iti_s: f64,
        iti_jitter_s: f64,
        lead_in_s: f64,
    },
    /// No stimulus at all.
    Silent,
}

/// Context the models see before the first generated sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prime {
    /// The zero-valued token, followed by a discarded warm-up of one receptive field.
    Zeros,
    /// Real token streams (streams × samples) with their label tracks.
    Data {
        tokens: Array2<u32>,
        condition: Vec<u32>,
        subject: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub duration_s: f64,
    pub fs: f64,
    pub conditions: ConditionSource,
    pub subject: u32,
    pub top_p: f64,
    pub seed: u64,
    pub prime: Prime,
    /// Names of the output channels; generated when empty.
    pub channel_names: Vec<String>,
}

impl GenerationPlan {
    pub fn new(duration_s: f64, fs: f64, conditions: ConditionSource, seed: u64) -> Self {
        Self {
            duration_s,
            fs,
            conditions,
            subject: 1,
            top_p: 0.8,
            seed,
            prime: Prime::Zeros,
            channel_names: Vec::new(),
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("generation duration must be positive"));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top-p mass must be in (0, 1], got {}", self.top_p)));
        }
        if self.subject == 0 {
            return Err(Error::UnknownLabel("subject 0; subjects start at 1".into()));
        }
        if let ConditionSource::Schedule {
            trial_duration_s,
            iti_s,
            iti_jitter_s,
            lead_in_s,
            ..
        } = self.conditions
        {
            if !(trial_duration_s > 0.0 && iti_s >= 0.0 && iti_jitter_s >= 0.0 && lead_in_s >= 0.0) {
                return Err(Error::invalid("schedule needs a positive trial duration and non-negative gaps"));
            }
        }
        Ok(())
    }

    /// Condition label of every generated sample.
    pub fn condition_track(&self) -> Result<Vec<u32>> {
        let n = self.n_samples();
        match &self.conditions {
            ConditionSource::Silent => Ok(vec![0; n]),
            ConditionSource::Track(t) => {
                if t.len() < n {
                    return Err(Error::invalid(format!(
                        "condition track has {} samples, plan needs {n}",
                        t.len()
                    )));
                }
                Ok(t[..n].to_vec())
            }
            ConditionSource::Schedule {
                n_conditions,
                trial_duration_s,
                iti_s,
                iti_jitter_s,
                lead_in_s,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(u64::MAX);
                let trial = ((trial_duration_s * self.fs).round() as usize).max(1);
                let mut track = vec![0; n];
                let mut t = (lead_in_s * self.fs).round() as usize;
                let mut block: Vec<u32> = Vec::new();
                while *n_conditions > 0 && t < n {
                    if block.is_empty() {
                        block = (1..=*n_conditions).collect();
                        block.shuffle(&mut rng);
                        block.reverse();
                    }
                    let k = block.pop().unwrap();
                    let end = (t + trial).min(n);
                    track[t..end].fill(k);
                    let jitter = if *iti_jitter_s > 0.0 { rng.gen_range(0.0..*iti_jitter_s) } else { 0.0 };
                    t += trial + ((iti_s + jitter) * self.fs).round().max(1.0) as usize;
                }
                Ok(track)
            }
        }
    }

    /// Canonical key-value description. A replayed track is referenced by length only.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new("generation_plan");
        w.put("duration_s", self.duration_s)
            .put("fs", self.fs)
            .put("subject", self.subject)
            .put("top_p", self.top_p)
            .put("seed", self.seed);
        match &self.conditions {
            ConditionSource::Silent => {
                w.put("conditions", "silent");
            }
            ConditionSource::Track(t) => {
                w.put("conditions", "track").put("track_len", t.len());
            }
            ConditionSource::Schedule {
                n_conditions,
                trial_duration_s,
                iti_s,
                iti_jitter_s,
                lead_in_s,
            } => {
                w.put("conditions", "schedule")
                    .put("n_conditions", n_conditions)
                    .put("trial_duration_s", trial_duration_s)
                    .put("iti_s", iti_s)
                    .put("iti_jitter_s", iti_jitter_s)
                    .put("lead_in_s", lead_in_s);
            }
        }
        match &self.prime {
            Prime::Zeros => w.put("prime", "zeros"),
            Prime::Data { tokens, .. } => w.put("prime", "data").put("prime_len", tokens.ncols()),
        };
        w.finish()
    }
}

/// Generated tokens (absent for the AR baseline) and their continuous reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Option<TokenizedRecording>,
    pub recording: Recording,
}

/// Samples of warm-up generated after a zero prime and then discarded.
pub fn warmup_len(model: &Model) -> usize {
    match model {
        Model::Ar(m) => m.spec.order,
        Model::Wavenet(m) => m.spec.receptive_field(),
        Model::ChannelGpt(m) => m.spec.min_ctx,
        Model::FlatGpt(m) => m.spec.min_ctx,
    }
}

/// Recursive generation from a checkpoint: every sampled token is fed back as the next input.
///
/// Each stream (channel or bucket) draws from its own deterministic random stream.
pub fn generate(ckpt: &Checkpoint, plan: &GenerationPlan) -> Result<Generated> {
    plan.validate()?;
    let model = &ckpt.model;
    if let Model::Ar(ar) = model {
        let rec = generate_ar_with(ar, plan)?;
        return Ok(Generated { tokens: None, recording: rec });
    }
    let codec = ckpt
        .codec
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint has no codec to detokenise with"))?;
    let labels = match model {
        Model::Wavenet(m) => m.spec.labels(),
        Model::ChannelGpt(m) => m.spec.labels(),
        Model::FlatGpt(m) => m.spec.labels(),
        Model::Ar(_) => unreachable!(),
    };
    labels.subject_row(plan.subject)?;
    let track = plan.condition_track()?;
    for &c in &track {
        labels.condition_row(c)?;
    }
    let streams = model.n_streams();
    let n = plan.n_samples();

    // inputs fed before the first kept sample
    let (prime_tokens, prime_cond, prime_subj, warmup) = match &plan.prime {
        Prime::Zeros => {
            let z = zero_tokens(codec, streams)?;
            (Array2::from_shape_fn((streams, 1), |(s, _)| z[s]), vec![0], vec![plan.subject], warmup_len(model))
        }
        Prime::Data {
            tokens,
            condition,
            subject,
        } => {
            if tokens.nrows() != streams || tokens.ncols() == 0 {
                return Err(Error::shape(format!("prime must have {streams} streams and at least one sample")));
            }
            if condition.len() != tokens.ncols() || subject.len() != tokens.ncols() {
                return Err(Error::shape("prime label tracks must match its length"));
            }
            (tokens.clone(), condition.clone(), subject.clone(), 0)
        }
    };
    // the input at step i carries the labels of the sample it is, and predicts step i + 1
    let mut cond_in: Vec<u32> = prime_cond;
    let mut subj_in: Vec<u32> = prime_subj;
    cond_in.extend(std::iter::repeat(0).take(warmup));
    subj_in.extend(std::iter::repeat(plan.subject).take(warmup));
    cond_in.extend(&track);
    subj_in.extend(std::iter::repeat(plan.subject).take(n));
    let n_prime = prime_tokens.ncols();
    let total = warmup + n;

    let mut rngs: Vec<ChaCha8Rng> = (0..streams)
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(plan.seed);
            r.set_stream(s as u64);
            r
        })
        .collect();
    let mut out = Array2::<u32>::zeros((streams, total));

    match model {
        Model::Wavenet(m) => {
            let mut st = m.state();
            let mut logits = Array2::zeros((0, 0));
            for i in 0..n_prime {
                let col: Vec<u32> = prime_tokens.column(i).to_vec();
                logits = m.step(&mut st, &col, cond_in[i], subj_in[i])?;
            }
            for j in 0..total {
                let col = sample_rows(&logits, plan.top_p, &mut rngs)?;
                out.column_mut(j).assign(&Array1::from(col.clone()));
                if j + 1 < total {
                    let k = n_prime + j;
                    logits = m.step(&mut st, &col, cond_in[k], subj_in[k])?;
                }
            }
        }
        Model::ChannelGpt(m) => {
            let mut st = m.state();
            let mut logits = Array2::zeros((0, 0));
            for i in 0..n_prime {
                let col: Vec<u32> = prime_tokens.column(i).to_vec();
                logits = m.step(&mut st, &col, cond_in[i], subj_in[i])?;
            }
            for j in 0..total {
                let col = sample_rows(&logits, plan.top_p, &mut rngs)?;
                out.column_mut(j).assign(&Array1::from(col.clone()));
                if j + 1 < total {
                    let k = n_prime + j;
                    logits = m.step(&mut st, &col, cond_in[k], subj_in[k])?;
                }
            }
        }
        Model::FlatGpt(m) => {
            let mut st = m.state();
            for i in 0..n_prime {
                m.begin_step(&mut st, cond_in[i], subj_in[i])?;
                for b in 0..streams {
                    m.push_code(&mut st, prime_tokens[[b, i]])?;
                }
            }
            for j in 0..total {
                let k = n_prime + j;
                let mut h = m.begin_step(&mut st, cond_in[k], subj_in[k])?;
                for (b, rng) in rngs.iter_mut().enumerate() {
                    let probs = m.bucket_distribution(&h, b)?;
                    let code = sample_top_p(&probs, plan.top_p, rng)? as u32;
                    out[[b, j]] = code;
                    if let Some(next) = m.push_code(&mut st, code)? {
                        h = next;
                    }
                }
            }
        }
        Model::Ar(_) => unreachable!(),
    }

    let kept = out.slice(ndarray::s![.., warmup..]).to_owned();
    let n_channels = codec.n_channels().unwrap_or(streams);
    let names = if plan.channel_names.is_empty() {
        default_channel_names(n_channels)
    } else if plan.channel_names.len() == n_channels {
        plan.channel_names.clone()
    } else {
        return Err(Error::shape(format!(
            "{} channel names for {n_channels} channels",
            plan.channel_names.len()
        )));
    };
    let tokens = TokenizedRecording {
        tokens: kept,
        codec: codec.clone(),
        fs: plan.fs,
        channel_names: names,
        condition: track,
        subject: vec![plan.subject; n],
    };
    let recording = detokenize(&tokens)?;
    Ok(Generated {
        tokens: Some(tokens),
        recording,
    })
}

/// Token of a zero-valued sample in every stream.
fn zero_tokens(codec: &Codec, streams: usize) -> Result<Vec<u32>> {
    let z = match codec {
        Codec::MuLaw(c) => vec![c.token(0.0)?; streams],
        Codec::Vq(c) => c.encode(Array2::zeros((c.n_channels(), 1)).view())?.column(0).to_vec(),
    };
    if z.len() != streams {
        return Err(Error::shape(format!("codec has {} streams, model {streams}", z.len())));
    }
    Ok(z)
}

fn sample_rows(logits: &Array2<f64>, p: f64, rngs: &mut [ChaCha8Rng]) -> Result<Vec<u32>> {
    rngs.iter_mut()
        .enumerate()
        .map(|(c, rng)| {
            let probs = softmax(logits.row(c).as_slice().expect("contiguous rows"));
            sample_top_p(&probs, p, rng).map(|k| k as u32)
        })
        .collect()
}

/// IIR simulation x_t = σ_c ε_t + b_c + Σ_k a_{c,k} x_{t−k} from a zero start,
/// discarding a warm-up of one model order.
pub fn generate_ar(model: &ArModel, duration_s: f64, fs: f64, seed: u64) -> Result<Recording> {
    generate_ar_with(model, &GenerationPlan::new(duration_s, fs, ConditionSource::Silent, seed))
}

fn generate_ar_with(model: &ArModel, plan: &GenerationPlan) -> Result<Recording> {
    plan.validate()?;
    let c = model.spec.n_channels;
    let k = model.spec.order;
    let n = plan.n_samples();
    let total = k + n;
    let coef = model.coefficients();
    let bias = model.intercepts();
    let sigma = model.noise_std();
    let mut x = Array2::<f64>::zeros((c, k + total));
    for ch in 0..c {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(ch as u64);
        for t in k..k + total {
            let e: f64 = rng.sample(StandardNormal);
            let mut v = sigma[ch] * e + bias[ch];
            for j in 0..k {
                v += coef[[ch, j]] * x[[ch, t - 1 - j]];
            }
            if !(v.abs() <= 1e6) {
                return Err(Error::Numerical(format!(
                    "AR recursion diverged on channel {ch} at sample {} (|x| = {:e}); coefficients are unstable",
                    t - k,
                    v.abs()
                )));
            }
            x[[ch, t]] = v;
        }
    }
    let data = x.slice(ndarray::s![.., 2 * k..]).to_owned();
    let names = if plan.channel_names.len() == c {
        plan.channel_names.clone()
    } else {
        default_channel_names(c)
    };
    Recording::from_f64(&data, plan.fs, names, plan.condition_track()?, vec![plan.subject; n])
}

#[cfg(test)]
mod tests;

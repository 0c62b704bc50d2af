use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::models::{flat_targets, Model, Window};
use crate::nn::Graph;
use crate::signal::find_onsets;
use crate::tokenize::TokenizedRecording;

/// A model that assigns a probability to each next sample given the label tracks.
pub trait ConditionalForecaster {
    /// Entry `t − 1` is log p(x_t | x_<t, labels), summed over streams, for t = 1..T.
    fn step_log_probs(&self, tokens: &Array2<u32>, condition: &[u32], subject: &[u32]) -> Result<Vec<f64>>;
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits[target] - lse
}

impl ConditionalForecaster for Model {
    fn step_log_probs(&self, tokens: &Array2<u32>, condition: &[u32], subject: &[u32]) -> Result<Vec<f64>> {
        let t = tokens.ncols();
        if t < 2 {
            return Err(Error::invalid("a trial needs at least two samples"));
        }
        let mut out = vec![0.0; t - 1];
        match self {
            Model::Ar(_) => return Err(Error::invalid("the AR model has no distribution over tokens")),
            Model::FlatGpt(m) => {
                let w = Window {
                    tokens: tokens.clone(),
                    condition: condition.to_vec(),
                    subject: subject.to_vec(),
                };
                let mut g = Graph::new(&m.params);
                let (h, n) = m.hidden(&mut g, std::slice::from_ref(&w))?;
                let hv = g.value(h);
                for (p, b, z) in flat_targets(m.spec.n_buckets, tokens, n, 1) {
                    let step = (p + 1) / (m.spec.n_buckets + 1);
                    let l = m.bucket_logits(&hv.row(p).to_owned(), b)?;
                    out[step - 1] += log_softmax_at(l.as_slice().unwrap(), z);
                }
            }
            Model::Wavenet(_) | Model::ChannelGpt(_) => {
                let w = Window {
                    tokens: tokens.slice(s![.., ..t - 1]).to_owned(),
                    condition: condition[..t - 1].to_vec(),
                    subject: subject[..t - 1].to_vec(),
                };
                let mut g = Graph::new(self.params());
                let v = match self {
                    Model::Wavenet(m) => m.forward(&mut g, std::slice::from_ref(&w))?,
                    Model::ChannelGpt(m) => m.forward(&mut g, std::slice::from_ref(&w))?,
                    _ => unreachable!(),
                };
                let logits = g.value(v);
                for c in 0..tokens.nrows() {
                    for i in 0..t - 1 {
                        let row = logits.row(c * (t - 1) + i);
                        out[i] += log_softmax_at(row.as_slice().unwrap(), tokens[[c, i + 1]] as usize);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A stretch of tokens to decode. The candidate label is applied at samples
/// where `active` is set; elsewhere the label track is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrial {
    pub tokens: Array2<u32>,
    pub active: Vec<bool>,
    pub subject: u32,
}

/// Posterior over candidate conditions after each scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTrace {
    pub candidates: Vec<u32>,
    /// Sample index of each row.
    pub steps: Vec<usize>,
    /// Cumulative log p(x | y = candidate), steps × candidates.
    pub log_lik: Array2<f64>,
    /// steps × candidates; rows sum to 1.
    pub posterior: Array2<f64>,
    /// log Σ_i prior_i · p(x | y = i) after each step.
    pub log_evidence: Vec<f64>,
}

impl PosteriorTrace {
    /// Candidate with the highest final posterior (lowest index on ties).
    pub fn decision(&self) -> u32 {
        let last = self.posterior.row(self.posterior.nrows() - 1);
        let mut best = 0;
        for i in 1..last.len() {
            if last[i] > last[best] {
                best = i;
            }
        }
        self.candidates[best]
    }
}

fn check_prior(prior: &[f64], k: usize) -> Result<()> {
    if prior.len() != k {
        return Err(Error::shape(format!("{} prior entries for {k} candidates", prior.len())));
    }
    if prior.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::invalid("prior entries must be finite and non-negative"));
    }
    let s: f64 = prior.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("prior sums to {s}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior over `candidates` from per-candidate log-likelihood increments
/// (steps × candidates) and a prior.
pub fn posterior_from_increments(candidates: &[u32], increments: &Array2<f64>, prior: &[f64]) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    let k = candidates.len();
    check_prior(prior, k)?;
    if increments.ncols() != k {
        return Err(Error::shape("one increment column per candidate"));
    }
    let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let n = increments.nrows();
    let mut cum = Array2::zeros((n, k));
    let mut post = Array2::zeros((n, k));
    let mut evidence = Vec::with_capacity(n);
    let mut run = vec![0.0; k];
    for t in 0..n {
        for i in 0..k {
            run[i] += increments[[t, i]];
            cum[[t, i]] = run[i];
        }
        let joint: Vec<f64> = (0..k).map(|i| log_prior[i] + run[i]).collect();
        let z = log_sum_exp(&joint);
        if !z.is_finite() {
            return Err(Error::Numerical(format!("evidence is not finite at step {t}")));
        }
        for i in 0..k {
            post[[t, i]] = (joint[i] - z).exp();
        }
        evidence.push(z);
    }
    Ok((cum, post, evidence))
}

/// Bayes-rule decoding: scores the trial under every candidate label and
/// normalises over the prior. Samples before `score_from` only serve as context.
pub fn bayes_posterior<M: ConditionalForecaster + ?Sized>(
    model: &M,
    trial: &DecodeTrial,
    candidates: &[u32],
    prior: &[f64],
    score_from: usize,
) -> Result<PosteriorTrace> {
    check_prior(prior, candidates.len())?;
    let t = trial.tokens.ncols();
    if trial.active.len() != t {
        return Err(Error::shape("activity mask must cover the trial"));
    }
    if score_from == 0 || score_from >= t {
        return Err(Error::invalid(format!("score_from must be in 1..{t}")));
    }
    let subject = vec![trial.subject; t];
    let mut inc = Array2::zeros((t - score_from, candidates.len()));
    for (i, &y) in candidates.iter().enumerate() {
        let cond: Vec<u32> = trial.active.iter().map(|&a| if a { y } else { 0 }).collect();
        let lp = model.step_log_probs(&trial.tokens, &cond, &subject)?;
        for (r, tt) in (score_from..t).enumerate() {
            inc[[r, i]] = lp[tt - 1];
        }
    }
    let (log_lik, posterior, log_evidence) = posterior_from_increments(candidates, &inc, prior)?;
    Ok(PosteriorTrace {
        candidates: candidates.to_vec(),
        steps: (score_from..t).collect(),
        log_lik,
        posterior,
        log_evidence,
    })
}

/// P(X ≥ k) for X ~ Binomial(n, p).
pub fn binomial_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // log pmf by recurrence from the mode side to stay in range
    let lp = p.ln();
    let lq = (1.0 - p).ln();
    let mut log_c = 0.0; // log C(n, i)
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            terms.push(log_c + i as f64 * lp + (n - i) as f64 * lq);
        }
    }
    log_sum_exp(&terms).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeDecoding {
    pub truths: Vec<u32>,
    pub predictions: Vec<u32>,
    pub accuracy: f64,
    /// One-sided binomial p-value against uniform guessing.
    pub p_value: f64,
}

/// Decodes every complete trial of `tok`: the window runs from `pre` samples
/// before each onset to `post` samples after it, the stimulus mask is taken
/// from the recorded track, and the prior is uniform over `candidates`.
pub fn decode_trials<M: ConditionalForecaster + ?Sized>(
    model: &M,
    tok: &TokenizedRecording,
    candidates: &[u32],
    pre: usize,
    post: usize,
    max_trials: Option<usize>,
) -> Result<GenerativeDecoding> {
    if candidates.len() < 2 {
        return Err(Error::invalid("at least two candidate conditions are required"));
    }
    if pre == 0 {
        return Err(Error::invalid("at least one sample of context before onset is required"));
    }
    let prior = vec![1.0 / candidates.len() as f64; candidates.len()];
    let mut truths = Vec::new();
    let mut predictions = Vec::new();
    for (onset, k) in find_onsets(&tok.condition) {
        if max_trials.is_some_and(|m| truths.len() >= m) {
            break;
        }
        if onset < pre || onset + post > tok.n_samples() || !candidates.contains(&k) {
            continue;
        }
        let range = onset - pre..onset + post;
        let trial = DecodeTrial {
            tokens: tok.tokens.slice(s![.., range.clone()]).to_owned(),
            active: tok.condition[range.clone()].iter().map(|&c| c != 0).collect(),
            subject: tok.subject[onset],
        };
        let tr = bayes_posterior(model, &trial, candidates, &prior, pre)?;
        truths.push(k);
        predictions.push(tr.decision());
    }
    if truths.is_empty() {
        return Err(Error::invalid("no complete trial to decode"));
    }
    let hits = truths.iter().zip(&predictions).filter(|(a, b)| a == b).count();
    Ok(GenerativeDecoding {
        accuracy: hits as f64 / truths.len() as f64,
        p_value: binomial_tail(hits, truths.len(), 1.0 / candidates.len() as f64),
        truths,
        predictions,
    })
}

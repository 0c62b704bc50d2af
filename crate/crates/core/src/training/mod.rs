//! Optimisation loop, batching, early stopping, gradient checks and checkpoints.

mod ablation;
mod batches;
mod checkpoint;

use ndarray::{s, Array2};

pub use ablation::{shuffle_trial_labels, trial_blocks, Ablations};
pub use batches::{evaluation_starts, BatchSampler};
pub use checkpoint::{Checkpoint, TrainingMeta};

use crate::error::{Error, Result};
use crate::models::{ArModel, Model, ModelSpec, TokenModel, Window};
use crate::nn::{gradient_deviation, Adam, Graph, ParamStore};
use crate::signal::Recording;
use crate::tokenize::TokenizedRecording;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    /// Shortest and longest input length of a training window.
    pub min_ctx: usize,
    pub max_ctx: usize,
    /// Optimiser steps per epoch; by default enough that the scored targets
    /// roughly match the number of training samples.
    pub steps_per_epoch: Option<usize>,
    /// Cap on validation windows (evenly spaced).
    pub max_val_windows: Option<usize>,
    pub loss: LossKind,
    pub seed: u64,
    pub ablations: Ablations,
}

impl TrainConfig {
    /// Defaults matched to a model spec: context range, loss kind.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let (min_ctx, max_ctx, loss) = match spec {
            ModelSpec::Ar(s) => (s.order, 2 * s.order, LossKind::MeanSquaredError),
            ModelSpec::Wavenet(s) => {
                let rf = s.receptive_field();
                (rf, 2 * rf, LossKind::CrossEntropy)
            }
            ModelSpec::ChannelGpt(s) => (s.min_ctx, s.max_ctx, LossKind::CrossEntropy),
            ModelSpec::FlatGpt(s) => (s.min_ctx, s.max_ctx, LossKind::CrossEntropy),
        };
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip: Some(1.0),
            max_epochs: 100,
            patience: 5,
            min_ctx,
            max_ctx,
            steps_per_epoch: None,
            max_val_windows: None,
            loss,
            seed: 0,
            ablations: Ablations::default(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be at least 1"));
        }
        if self.min_ctx == 0 || self.min_ctx > self.max_ctx {
            return Err(Error::invalid(format!(
                "context range {}..={} is empty",
                self.min_ctx, self.max_ctx
            )));
        }
        self.ablations.validate()?;
        let (limit, loss) = match spec {
            ModelSpec::Ar(s) => {
                if self.min_ctx < s.order {
                    return Err(Error::invalid("AR context must be at least the model order"));
                }
                (usize::MAX, LossKind::MeanSquaredError)
            }
            ModelSpec::Wavenet(_) => (usize::MAX, LossKind::CrossEntropy),
            ModelSpec::ChannelGpt(s) => (s.max_ctx, LossKind::CrossEntropy),
            ModelSpec::FlatGpt(s) => (s.max_ctx, LossKind::CrossEntropy),
        };
        if self.max_ctx > limit {
            return Err(Error::invalid(format!(
                "context {} exceeds the model's position table of {limit}",
                self.max_ctx
            )));
        }
        if self.loss != loss {
            return Err(Error::invalid(format!(
                "{} models train with {loss:?}, not {:?}",
                spec.family(),
                self.loss
            )));
        }
        if self.ablations.apply_to_spec(spec) != *spec {
            return Err(Error::invalid(
                "embedding ablations must be built into the model spec (see Ablations::apply_to_spec)",
            ));
        }
        Ok(())
    }

    fn epoch_steps(&self, n_samples: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| {
            let targets_per_window = (self.max_ctx - self.min_ctx) / 2 + 1;
            n_samples.div_ceil(self.batch_size * targets_per_window).max(1)
        })
    }

    fn optimizer(&self, params: &ParamStore) -> Adam {
        match self.optimizer {
            OptimizerKind::Adam => {
                let mut a = Adam::new(params, self.learning_rate);
                a.clip = self.grad_clip;
                a
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run: the best checkpoint and the loss curves.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Whether the run ended by early stopping rather than the epoch limit.
    pub stopped_early: bool,
}

/// Trains a token model with next-token cross-entropy and early stopping.
///
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn train(model: Model, train: &TokenizedRecording, val: &TokenizedRecording, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let spec = model.spec();
    cfg.validate(&spec)?;
    if model.as_token_model().is_none() {
        return Err(Error::invalid("the AR baseline trains on continuous data; use train_ar"));
    }
    check_data(&model, train)?;
    check_data(&model, val)?;
    let codec = Some(train.codec.clone());
    let train = relabelled(train, cfg, 0);
    let val = relabelled(val, cfg, 1);
    let val_windows: Vec<Window> = evaluation_starts(val.n_samples(), cfg.min_ctx, cfg.max_ctx, cfg.max_val_windows)?
        .into_iter()
        .map(|s| batches::window_at(&val, s, (cfg.max_ctx + 1).min(val.n_samples())))
        .collect();
    let mut sampler = BatchSampler::new(train.n_samples(), cfg.batch_size, cfg.min_ctx, cfg.max_ctx, cfg.seed)?;
    let steps = cfg.epoch_steps(train.n_samples());
    run_loop(model, codec, cfg, steps, |m: &Model, g: &mut Graph| {
        let batch = sampler.next_batch(&train);
        m.as_token_model().unwrap().loss(g, &batch, cfg.min_ctx)
    }, |m: &Model| token_eval_loss(m.as_token_model().unwrap(), &val_windows, cfg))
}

/// Fits the AR baseline by gradient descent on the one-step squared error,
/// then sets its generation noise to the per-channel residual RMS on `train`.
pub fn train_ar(model: ArModel, train: &Recording, val: &Recording, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let spec = ModelSpec::Ar(model.spec.clone());
    cfg.validate(&spec)?;
    for r in [train, val] {
        if r.n_channels() != model.spec.n_channels {
            return Err(Error::shape(format!(
                "recording has {} channels, model expects {}",
                r.n_channels(),
                model.spec.n_channels
            )));
        }
    }
    let train_x = train.data_f64();
    let val_x = val.data_f64();
    let val_segments: Vec<Array2<f64>> = evaluation_starts(val_x.ncols(), cfg.min_ctx, cfg.max_ctx, cfg.max_val_windows)?
        .into_iter()
        .map(|s| {
            let len = (cfg.max_ctx + 1).min(val_x.ncols());
            val_x.slice(s![.., s..s + len]).to_owned()
        })
        .collect();
    if val_segments.iter().any(|s| s.ncols() <= model.spec.order) {
        return Err(Error::invalid("validation data shorter than the AR order"));
    }
    let mut sampler = BatchSampler::new(train_x.ncols(), cfg.batch_size, cfg.min_ctx, cfg.max_ctx, cfg.seed)?;
    let steps = cfg.epoch_steps(train_x.ncols());
    let mut out = run_loop(
        Model::Ar(model),
        None,
        cfg,
        steps,
        |m: &Model, g: &mut Graph| {
            let Model::Ar(ar) = m else { unreachable!() };
            ar.loss(g, &sampler.next_segments(&train_x))
        },
        |m: &Model| {
            let Model::Ar(ar) = m else { unreachable!() };
            let mut g = Graph::new(&ar.params);
            let l = ar.loss(&mut g, &val_segments)?;
            Ok(g.scalar(l))
        },
    )?;
    let Model::Ar(ar) = &mut out.checkpoint.model else { unreachable!() };
    let rms = residual_rms(ar, &train_x)?;
    ar.set_noise_std(&rms)?;
    ar.params.round_to_f32();
    Ok(out)
}

/// Per-channel RMS of the one-step prediction error over `data`.
pub fn residual_rms(model: &ArModel, data: &Array2<f64>) -> Result<Vec<f64>> {
    let k = model.spec.order;
    if data.ncols() <= k {
        return Err(Error::invalid("data shorter than the AR order"));
    }
    let coef = model.coefficients();
    let bias = model.intercepts();
    Ok((0..data.nrows())
        .map(|c| {
            let x = data.row(c);
            let mut acc = 0.0;
            for t in k..x.len() {
                let mut p = bias[c];
                for j in 0..k {
                    p += coef[[c, j]] * x[t - 1 - j];
                }
                acc += (x[t] - p).powi(2);
            }
            (acc / (x.len() - k) as f64).sqrt()
        })
        .collect())
}

fn run_loop<S, V>(mut model: Model, codec: Option<crate::tokenize::Codec>, cfg: &TrainConfig, steps: usize, mut step_loss: S, mut val_loss: V) -> Result<TrainOutcome>
where
    S: FnMut(&Model, &mut Graph) -> Result<crate::nn::Var>,
    V: FnMut(&Model) -> Result<f64>,
{
    let mut opt = cfg.optimizer(model.params());
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let grads = {
                let mut g = Graph::new(model.params());
                let l = step_loss(&model, &mut g)?;
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "training loss became {v} at epoch {epoch}, step {step} (learning rate {})",
                        cfg.learning_rate
                    )));
                }
                total += v;
                g.backward(l)
            };
            if !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            opt.step(model.params_mut(), &grads);
        }
        let val = val_loss(&model)?;
        if !val.is_finite() {
            return Err(Error::Numerical(format!("validation loss became {val} at epoch {epoch}")));
        }
        history.push(EpochLog {
            epoch,
            train_loss: total / steps as f64,
            val_loss: val,
        });
        if val < best.0 {
            best = (val, epoch, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    *model.params_mut() = best.2;
    let meta = TrainingMeta {
        epoch: best.1,
        best_val_loss: best.0,
        optimizer_steps: opt.steps_taken(),
        seed: cfg.seed,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, codec, meta),
        history,
        stopped_early,
    })
}

/// Mean cross-entropy over fixed evaluation windows, weighted by window count.
pub fn token_eval_loss(model: &dyn TokenModel, windows: &[Window], cfg: &TrainConfig) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    let mut acc = 0.0;
    for chunk in windows.chunks(cfg.batch_size) {
        let mut g = Graph::new(model.params());
        let l = model.loss(&mut g, chunk, cfg.min_ctx)?;
        acc += g.scalar(l) * chunk.len() as f64;
    }
    Ok(acc / windows.len() as f64)
}

fn check_data(model: &Model, data: &TokenizedRecording) -> Result<()> {
    if Some(data.vocab_size()) != model.vocab_size() && !matches!(model, Model::FlatGpt(_)) {
        return Err(Error::invalid(format!(
            "data vocabulary {} differs from the model's {:?}",
            data.vocab_size(),
            model.vocab_size()
        )));
    }
    if let Model::FlatGpt(m) = model {
        let codes = data.tokens.iter().copied().max().unwrap_or(0) as usize;
        if codes >= m.spec.vocab {
            return Err(Error::invalid(format!(
                "code {codes} outside the model's vocabulary {}",
                m.spec.vocab
            )));
        }
    }
    if data.n_streams() != model.n_streams() {
        return Err(Error::shape(format!(
            "data has {} streams, model expects {}",
            data.n_streams(),
            model.n_streams()
        )));
    }
    Ok(())
}

fn relabelled(data: &TokenizedRecording, cfg: &TrainConfig, salt: u64) -> TokenizedRecording {
    let mut d = data.clone();
    d.condition = cfg.ablations.relabel(&data.condition, cfg.seed ^ (0x5EED << 8) ^ salt);
    d
}

/// Largest relative deviation between analytic and finite-difference gradients
/// of the training loss of `model` on `batch`.
pub fn gradient_check(model: &Model, batch: &[Window], min_ctx: usize, eps: f64) -> Result<f64> {
    const FLOOR: f64 = 1e-6;
    if model.n_params() > 10_000 {
        return Err(Error::invalid(format!(
            "gradient check is limited to 10^4 parameters, model has {}",
            model.n_params()
        )));
    }
    match model {
        Model::Ar(ar) => {
            let segments: Vec<Array2<f64>> = batch
                .iter()
                .map(|w| w.tokens.mapv(|q| f64::from(q) / 16.0 - 0.5))
                .collect();
            ar.loss(&mut Graph::new(&ar.params), &segments)?;
            Ok(gradient_deviation(&ar.params, eps, FLOOR, |g| ar.loss(g, &segments).unwrap()))
        }
        _ => {
            let tm = model.as_token_model().unwrap();
            tm.loss(&mut Graph::new(tm.params()), batch, min_ctx)?;
            Ok(gradient_deviation(tm.params(), eps, FLOOR, |g| tm.loss(g, batch, min_ctx).unwrap()))
        }
    }
}

#[cfg(test)]
mod tests;

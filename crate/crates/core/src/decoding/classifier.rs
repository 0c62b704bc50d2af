use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamId, ParamStore, Var};
use crate::signal::EpochedData;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of each condition's trials held out for validation.
    pub val_fraction: f64,
    /// Width after the channel reduction; `None` gives min(C, 80).
    pub reduced_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.2,
            reduced_dim: None,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("learning rate, batch size, epochs and patience must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Four affine layers without nonlinearities: a per-timepoint reduction across
/// channels, two width-preserving per-timepoint layers, and a readout over the
/// flattened (time, feature) map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub params: ParamStore,
    /// Condition label of each output unit.
    pub classes: Vec<u32>,
    pub n_channels: usize,
    pub epoch_len: usize,
    pub reduced_dim: usize,
    layers: [(ParamId, ParamId); 4],
}

impl LinearClassifier {
    pub fn new(n_channels: usize, epoch_len: usize, classes: Vec<u32>, reduced_dim: Option<usize>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid("at least two conditions are required"));
        }
        let r = reduced_dim.unwrap_or(n_channels.min(80));
        if r == 0 || n_channels == 0 || epoch_len == 0 {
            return Err(Error::invalid("classifier dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = classes.len();
        let mut layer = |name: &str, fan_in: usize, fan_out: usize, p: &mut ParamStore| {
            (
                p.add_normal(format!("{name}.w"), (fan_in, fan_out), 1.0 / (fan_in as f64).sqrt(), &mut rng),
                p.add_const(format!("{name}.b"), (1, fan_out), 0.0),
            )
        };
        let layers = [
            layer("reduce", n_channels, r, &mut p),
            layer("mix1", r, r, &mut p),
            layer("mix2", r, r, &mut p),
            layer("readout", epoch_len * r, k, &mut p),
        ];
        Ok(Self {
            params: p,
            classes,
            n_channels,
            epoch_len,
            reduced_dim: r,
            layers,
        })
    }

    /// Layer shapes as (inputs, outputs).
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|(w, _)| self.params.get(*w).dim()).collect()
    }

    fn check(&self, x: &Array3<f64>) -> Result<()> {
        let (_, c, l) = x.dim();
        if c != self.n_channels || l != self.epoch_len {
            return Err(Error::shape(format!(
                "epochs of {c} channels × {l} samples, classifier expects {} × {}",
                self.n_channels, self.epoch_len
            )));
        }
        Ok(())
    }

    /// trials × classes logits.
    fn logits(&self, g: &mut Graph, x: &Array3<f64>) -> Var {
        let (n, c, l) = x.dim();
        // rows (trial, time), columns channels
        let rows = x.view().permuted_axes([0, 2, 1]).as_standard_layout().into_shape_with_order((n * l, c)).unwrap().to_owned();
        let mut h = g.input(rows);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i == 3 {
                h = g.reshape(h, n);
            }
            let wv = g.param(w);
            let bv = g.param(b);
            h = g.matmul(h, wv);
            h = g.add_bias(h, bv);
        }
        h
    }

    pub fn predict_logits(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut g = Graph::new(&self.params);
        let v = self.logits(&mut g, x);
        Ok(g.value(v).clone())
    }

    pub fn predict(&self, x: &Array3<f64>) -> Result<Vec<u32>> {
        let l = self.predict_logits(x)?;
        Ok(l.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect())
    }

    /// Fraction of trials classified correctly. Trials with conditions unknown
    /// to the classifier are an error.
    pub fn accuracy(&self, epochs: &EpochedData) -> Result<f64> {
        self.labels_of(epochs)?;
        let p = self.predict(&epochs.epochs)?;
        let hits = p.iter().zip(&epochs.conditions).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / epochs.n_trials().max(1) as f64)
    }

    fn labels_of(&self, epochs: &EpochedData) -> Result<Vec<usize>> {
        epochs
            .conditions
            .iter()
            .map(|k| {
                self.classes
                    .iter()
                    .position(|c| c == k)
                    .ok_or_else(|| Error::UnknownLabel(format!("condition {k} is not a classifier class")))
            })
            .collect()
    }

    fn loss_on(&self, x: &Array3<f64>, y: &[usize]) -> f64 {
        let mut g = Graph::new(&self.params);
        let lg = self.logits(&mut g, x);
        let l = g.softmax_ce(lg, y.to_vec(), vec![1.0; y.len()], y.len() as f64);
        g.scalar(l)
    }

    /// Trains on `train` with early stopping on `val` cross-entropy, keeping the
    /// best parameters. Starts from the current weights.
    pub fn fit(&mut self, train: &EpochedData, val: &EpochedData, cfg: &ClassifierConfig) -> Result<Vec<(f64, f64)>> {
        cfg.validate()?;
        self.check(&train.epochs)?;
        self.check(&val.epochs)?;
        let ytr = self.labels_of(train)?;
        let yva = self.labels_of(val)?;
        if ytr.is_empty() || yva.is_empty() {
            return Err(Error::invalid("training and validation sets must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut opt = Adam::new(&self.params, cfg.learning_rate);
        let mut best = (self.loss_on(&val.epochs, &yva), self.params.clone());
        let mut history = Vec::new();
        let mut since = 0;
        let mut order: Vec<usize> = (0..ytr.len()).collect();
        for _ in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = train.epochs.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
                let grads = {
                    let mut g = Graph::new(&self.params);
                    let lg = self.logits(&mut g, &xb);
                    let l = g.softmax_ce(lg, yb, vec![1.0; chunk.len()], chunk.len() as f64);
                    total += g.scalar(l) * chunk.len() as f64;
                    g.backward(l)
                };
                if !grads.is_finite() {
                    return Err(Error::Numerical("classifier gradient is not finite".into()));
                }
                opt.step(&mut self.params, &grads);
            }
            let vl = self.loss_on(&val.epochs, &yva);
            history.push((total / ytr.len() as f64, vl));
            if vl < best.0 {
                best = (vl, self.params.clone());
                since = 0;
            } else {
                since += 1;
                if since >= cfg.patience {
                    break;
                }
            }
        }
        self.params = best.1;
        Ok(history)
    }
}

/// Per-condition split with `val_fraction` of each condition's trials (at least
/// one) held out, drawn with `seed`.
pub fn split_per_condition(epochs: &EpochedData, val_fraction: f64, seed: u64) -> Result<(EpochedData, EpochedData)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for k in epochs.condition_set() {
        let mut idx = epochs.trials_of(k);
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "condition {k} has {} trial(s); training and validation both need one",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        va.extend_from_slice(&idx[..n_val]);
        tr.extend_from_slice(&idx[n_val..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    Ok((epochs.select(&tr), epochs.select(&va)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutcome {
    pub classifier: LinearClassifier,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// (train loss, validation loss) per epoch.
    pub history: Vec<(f64, f64)>,
}

/// Trains a fresh classifier with a 4:1 per-condition split of `epochs`.
pub fn train_classifier(epochs: &EpochedData, cfg: &ClassifierConfig) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let classes = epochs.condition_set();
    if classes.len() < 2 {
        return Err(Error::invalid("at least two conditions are required"));
    }
    let clf = LinearClassifier::new(epochs.n_channels(), epochs.epoch_len(), classes, cfg.reduced_dim, cfg.seed)?;
    fine_tune(clf, epochs, cfg)
}

/// Continues training an existing classifier on `epochs` with the same split rule.
pub fn fine_tune(mut clf: LinearClassifier, epochs: &EpochedData, cfg: &ClassifierConfig) -> Result<ClassifierOutcome> {
    let (train, val) = split_per_condition(epochs, cfg.val_fraction, cfg.seed)?;
    if train.condition_set() != clf.classes {
        return Err(Error::invalid("training split does not contain every classifier class"));
    }
    let history = clf.fit(&train, &val, cfg)?;
    Ok(ClassifierOutcome {
        train_accuracy: clf.accuracy(&train)?,
        val_accuracy: clf.accuracy(&val)?,
        classifier: clf,
        history,
    })
}

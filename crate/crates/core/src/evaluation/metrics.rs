use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::models::{flat_targets, ArModel, Model, Window};
use crate::nn::Graph;
use crate::signal::Recording;
use crate::tokenize::{mu_law, Codec, MuLawCodec, TokenizedRecording};
use crate::training::evaluation_starts;

/// Next-step prediction scores. Accuracies are percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub mse: f64,
    pub top1: f64,
    pub top5: f64,
    /// Number of scored predictions.
    pub n: usize,
}

/// Scores of a model and of the repeat-last-value baseline on the same targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastMetrics {
    pub model: MetricSet,
    pub repeat: MetricSet,
}

/// Running totals behind a [`MetricSet`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    pub n: usize,
    pub top1: usize,
    pub top5: usize,
    pub sq_err: f64,
    /// Number of scalar values the squared error is summed over.
    pub n_values: usize,
}

impl MetricAccumulator {
    /// Records one prediction given the rank of the true class (0 = best).
    pub fn add(&mut self, rank: usize, sq_err: f64, n_values: usize) {
        self.n += 1;
        self.top1 += usize::from(rank < 1);
        self.top5 += usize::from(rank < 5);
        self.sq_err += sq_err;
        self.n_values += n_values;
    }

    pub fn finish(&self) -> Result<MetricSet> {
        if self.n == 0 {
            return Err(Error::invalid("no predictions were scored"));
        }
        Ok(MetricSet {
            mse: self.sq_err / self.n_values.max(1) as f64,
            top1: 100.0 * self.top1 as f64 / self.n as f64,
            top5: 100.0 * self.top5 as f64 / self.n as f64,
            n: self.n,
        })
    }
}

/// Position of `target` when classes are ordered by descending score, ties
/// going to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

/// Position of `target` when classes are ordered by distance to `point`, ties
/// going to the lower index. `coords` has one row per class.
pub fn distance_rank(coords: &Array2<f64>, point: &[f64], target: usize) -> usize {
    let d = |i: usize| -> f64 {
        coords
            .row(i)
            .iter()
            .zip(point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let dt = d(target);
    (0..coords.nrows())
        .filter(|&i| {
            let di = d(i);
            di < dt || (di == dt && i < target)
        })
        .count()
}

/// Per-stream lookup tables: reconstructed values for squared error and
/// coordinates in which nearby classes are found.
struct StreamTables {
    recon: Vec<Array2<f64>>,
    coords: Vec<Array2<f64>>,
}

impl StreamTables {
    fn new(codec: &Codec, streams: usize) -> Result<Self> {
        match codec {
            Codec::MuLaw(c) => {
                let recon = Array2::from_shape_vec((c.n_bins, 1), c.values()).unwrap();
                let coords = Array2::from_shape_fn((c.n_bins, 1), |(q, _)| c.bin_centre(q as u32));
                Ok(Self {
                    recon: vec![recon; streams],
                    coords: vec![coords; streams],
                })
            }
            Codec::Vq(c) => {
                if c.n_buckets() != streams {
                    return Err(Error::shape("codec bucket count differs from the data"));
                }
                let mut recon = Vec::with_capacity(streams);
                for cb in &c.codebooks {
                    let v = cb.vocab_size();
                    let mut t = Array2::zeros((v, cb.dim()));
                    for q in 0..v {
                        t.row_mut(q).assign(&cb.decode_token(q as u32)?);
                    }
                    recon.push(t);
                }
                Ok(Self {
                    coords: recon.clone(),
                    recon,
                })
            }
        }
    }

    fn sq_err(&self, s: usize, a: usize, b: usize) -> f64 {
        let t = &self.recon[s];
        t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn width(&self, s: usize) -> usize {
        self.recon[s].ncols()
    }
}

/// Top-1/top-5 accuracy and squared error of the argmax forecast over held-out tokens,
/// together with the repeat baseline, on every target at or after `min_ctx` in
/// evaluation windows of `max_ctx + 1` samples.
pub fn forecast_metrics(
    model: &Model,
    test: &TokenizedRecording,
    min_ctx: usize,
    max_ctx: usize,
    max_windows: Option<usize>,
) -> Result<ForecastMetrics> {
    if test.n_samples() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    if min_ctx == 0 {
        return Err(Error::invalid("min_ctx must be at least 1"));
    }
    if test.n_streams() != model.n_streams() {
        return Err(Error::shape("test data streams differ from the model"));
    }
    let tables = StreamTables::new(&test.codec, test.n_streams())?;
    let len = (max_ctx + 1).min(test.n_samples());
    let starts = evaluation_starts(test.n_samples(), min_ctx, max_ctx, max_windows)?;
    let mut acc = MetricAccumulator::default();
    let mut rep = MetricAccumulator::default();
    let mut score = |s: usize, logits: &[f64], target: usize, prev: usize| {
        let pred = argmax(logits);
        acc.add(rank_of(logits, target), tables.sq_err(s, pred, target), tables.width(s));
        let p = tables.coords[s].row(prev).to_vec();
        rep.add(distance_rank(&tables.coords[s], &p, target), tables.sq_err(s, prev, target), tables.width(s));
    };
    for start in starts {
        let w = Window {
            tokens: test.tokens.slice(s![.., start..start + len]).to_owned(),
            condition: test.condition[start..start + len].to_vec(),
            subject: test.subject[start..start + len].to_vec(),
        };
        match model {
            Model::Ar(_) => return Err(Error::invalid("use forecast_metrics_ar for the AR baseline")),
            Model::FlatGpt(m) => {
                let mut g = Graph::new(&m.params);
                let (h, n) = m.hidden(&mut g, std::slice::from_ref(&w))?;
                let hidden = g.value(h);
                let b_all = m.spec.n_buckets;
                for (p, b, z) in flat_targets(b_all, &w.tokens, n, min_ctx) {
                    let step = (p + 1) / (b_all + 1);
                    let logits = m.bucket_logits(&hidden.row(p).to_owned(), b)?;
                    let prev = w.tokens[[b, step - 1]] as usize;
                    score(b, logits.as_slice().unwrap(), z, prev);
                }
            }
            Model::Wavenet(_) | Model::ChannelGpt(_) => {
                let inputs = Window {
                    tokens: w.tokens.slice(s![.., ..len - 1]).to_owned(),
                    condition: w.condition[..len - 1].to_vec(),
                    subject: w.subject[..len - 1].to_vec(),
                };
                let logits = {
                    let params = model.params();
                    let mut g = Graph::new(params);
                    let v = match model {
                        Model::Wavenet(m) => m.forward(&mut g, std::slice::from_ref(&inputs))?,
                        Model::ChannelGpt(m) => m.forward(&mut g, std::slice::from_ref(&inputs))?,
                        _ => unreachable!(),
                    };
                    g.value(v).clone()
                };
                let n_in = len - 1;
                for c in 0..w.n_streams() {
                    for t in 0..n_in {
                        if t + 1 < min_ctx {
                            continue;
                        }
                        let row = logits.row(c * n_in + t);
                        score(
                            c,
                            row.as_slice().unwrap(),
                            w.tokens[[c, t + 1]] as usize,
                            w.tokens[[c, t]] as usize,
                        );
                    }
                }
            }
        }
    }
    Ok(ForecastMetrics {
        model: acc.finish()?,
        repeat: rep.finish()?,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// AR scores: the continuous one-step prediction is binned with `codec` for
/// top-1, the five bins nearest to it (in the companded domain) form the top-5
/// set, and squared error is taken on the continuous scale. The repeat
/// baseline predicts the previous sample.
pub fn forecast_metrics_ar(model: &ArModel, test: &Recording, codec: &MuLawCodec, max_windows: Option<usize>) -> Result<ForecastMetrics> {
    let k = model.spec.order;
    if test.n_samples() <= k {
        return Err(Error::invalid("test recording shorter than the AR order"));
    }
    let x = test.data_f64();
    let coords = Array2::from_shape_fn((codec.n_bins, 1), |(q, _)| codec.bin_centre(q as u32));
    let compand = |v: f64| mu_law(v.clamp(-1.0, 1.0), codec.mu);
    let mut targets: Vec<usize> = (k..test.n_samples()).collect();
    if let Some(m) = max_windows {
        // evenly thinned target positions
        let n = targets.len();
        let keep = (m.max(1) * 64).min(n);
        targets = (0..keep).map(|i| targets[i * n / keep]).collect();
    }
    let mut acc = MetricAccumulator::default();
    let mut rep = MetricAccumulator::default();
    for &t in &targets {
        let pred = model.predict(x.slice(s![.., t - k..t]))?;
        for c in 0..x.nrows() {
            let truth = x[[c, t]];
            let target_bin = codec.token(truth.clamp(-1.0, 1.0))? as usize;
            let yp = compand(pred[c])?;
            acc.add(distance_rank(&coords, &[yp], target_bin), (pred[c] - truth).powi(2), 1);
            let prev = x[[c, t - 1]];
            let yr = compand(prev)?;
            rep.add(distance_rank(&coords, &[yr], target_bin), (prev - truth).powi(2), 1);
        }
    }
    Ok(ForecastMetrics {
        model: acc.finish()?,
        repeat: rep.finish()?,
    })
}

/// Accuracy of random score vectors against random targets; used to confirm the
/// harness reproduces the analytic chance levels 1/Q and 5/Q.
pub fn random_prediction_accuracy(q: usize, n: usize, seed: u64) -> MetricSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MetricAccumulator::default();
    let mut scores = Array1::<f64>::zeros(q);
    for _ in 0..n {
        scores.mapv_inplace(|_| rng.gen::<f64>());
        let target = rng.gen_range(0..q);
        acc.add(rank_of(scores.as_slice().unwrap(), target), 0.0, 1);
    }
    acc.finish().expect("n > 0")
}

use ndarray::{s, Array2, Array3, Axis};

use super::Recording;
use crate::error::{Error, Result};

/// Stimulus-locked trials cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochedData {
    /// trials × channels × samples
    pub epochs: Array3<f64>,
    /// Onset sample index (in the source recording) of each kept trial.
    pub onsets: Vec<usize>,
    pub conditions: Vec<u32>,
    /// Samples before onset included at the start of each epoch.
    pub pre: usize,
    pub fs: f64,
    /// Onsets dropped because the window would leave the recording.
    pub dropped: usize,
}

impl EpochedData {
    pub fn n_trials(&self) -> usize {
        self.epochs.len_of(Axis(0))
    }

    pub fn n_channels(&self) -> usize {
        self.epochs.len_of(Axis(1))
    }

    pub fn epoch_len(&self) -> usize {
        self.epochs.len_of(Axis(2))
    }

    /// Distinct conditions in ascending order.
    pub fn condition_set(&self) -> Vec<u32> {
        let mut c = self.conditions.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn trials_of(&self, condition: u32) -> Vec<usize> {
        (0..self.n_trials())
            .filter(|&i| self.conditions[i] == condition)
            .collect()
    }

    /// Keeps the listed trials, in the given order.
    pub fn select(&self, trials: &[usize]) -> EpochedData {
        EpochedData {
            epochs: self.epochs.select(Axis(0), trials),
            onsets: trials.iter().map(|&i| self.onsets[i]).collect(),
            conditions: trials.iter().map(|&i| self.conditions[i]).collect(),
            pre: self.pre,
            fs: self.fs,
            dropped: 0,
        }
    }

    /// Mean over the given trials, channels × samples.
    pub fn mean_of(&self, trials: &[usize]) -> Array2<f64> {
        let (_, c, t) = self.epochs.dim();
        let mut acc = Array2::zeros((c, t));
        for &i in trials {
            acc += &self.epochs.index_axis(Axis(0), i);
        }
        if !trials.is_empty() {
            acc /= trials.len() as f64;
        }
        acc
    }

    /// Population variance over the given trials, channels × samples.
    pub fn variance_of(&self, trials: &[usize]) -> Array2<f64> {
        let mean = self.mean_of(trials);
        let mut acc = Array2::zeros(mean.dim());
        for &i in trials {
            let d = &self.epochs.index_axis(Axis(0), i) - &mean;
            acc += &d.mapv(|v| v * v);
        }
        if !trials.is_empty() {
            acc /= trials.len() as f64;
        }
        acc
    }

    /// Concatenates epoch sets with identical geometry.
    pub fn concat(parts: &[&EpochedData]) -> Result<EpochedData> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let views: Vec<_> = parts.iter().map(|p| p.epochs.view()).collect();
        let epochs =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(EpochedData {
            epochs,
            onsets: parts.iter().flat_map(|p| p.onsets.iter().copied()).collect(),
            conditions: parts.iter().flat_map(|p| p.conditions.iter().copied()).collect(),
            pre: first.pre,
            fs: first.fs,
            dropped: parts.iter().map(|p| p.dropped).sum(),
        })
    }
}

/// Sample indices where the condition track switches to a nonzero condition.
pub fn find_onsets(track: &[u32]) -> Vec<(usize, u32)> {
    let mut prev = 0u32;
    let mut out = Vec::new();
    for (t, &k) in track.iter().enumerate() {
        if k != 0 && k != prev {
            out.push((t, k));
        }
        prev = k;
    }
    out
}

/// Epochs `[onset - t_pre, onset + t_post)` around every stimulus onset (times in seconds).
pub fn epoch(rec: &Recording, t_pre: f64, t_post: f64) -> Result<EpochedData> {
    if t_pre < 0.0 || !(t_post > 0.0) {
        return Err(Error::invalid("t_pre must be ≥ 0 and t_post > 0"));
    }
    let pre = (t_pre * rec.fs).round() as usize;
    let post = (t_post * rec.fs).round() as usize;
    epoch_samples(rec, pre, post)
}

/// Sample-based variant of [`epoch`].
pub fn epoch_samples(rec: &Recording, pre: usize, post: usize) -> Result<EpochedData> {
    if post == 0 {
        return Err(Error::invalid("epoch must extend at least one sample past onset"));
    }
    let len = pre + post;
    let t = rec.n_samples();
    let mut kept = Vec::new();
    let mut dropped = 0;
    for (onset, k) in find_onsets(&rec.condition) {
        if onset < pre || onset + post > t {
            dropped += 1;
        } else {
            kept.push((onset, k));
        }
    }
    let c = rec.n_channels();
    let mut epochs = Array3::zeros((kept.len(), c, len));
    for (i, &(onset, _)) in kept.iter().enumerate() {
        let src = rec.data.slice(s![.., onset - pre..onset + post]);
        epochs
            .index_axis_mut(Axis(0), i)
            .assign(&src.mapv(f64::from));
    }
    Ok(EpochedData {
        epochs,
        onsets: kept.iter().map(|&(o, _)| o).collect(),
        conditions: kept.iter().map(|&(_, k)| k).collect(),
        pre,
        fs: rec.fs,
        dropped,
    })
}

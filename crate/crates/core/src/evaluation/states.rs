use ndarray::{Array2, ArrayView2};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use super::{pearson, HmmModel};
use crate::error::{Error, Result};
use crate::signal::{find_onsets, welch_segments};

/// Dynamics of a discrete state path. Per-state entries are `None` for states
/// that are never visited (lifetime) or visited only once (interval).
#[derive(Debug, Clone, PartialEq)]
pub struct StateStats {
    pub fractional_occupancy: Vec<f64>,
    /// Mean visit length in seconds.
    pub mean_lifetime_s: Vec<Option<f64>>,
    /// Mean time between the end of one visit and the start of the next, in seconds.
    pub mean_interval_s: Vec<Option<f64>>,
    /// State changes per second.
    pub switching_rate: f64,
}

/// Maximal runs of equal states as (state, start, length).
pub fn runs(path: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &s) in path.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.0 == s => r.2 += 1,
            _ => out.push((s, t, 1)),
        }
    }
    out
}

pub fn summary_stats(path: &[usize], n_states: usize, fs: f64) -> Result<StateStats> {
    if path.len() < 2 {
        return Err(Error::invalid("state path needs at least two samples"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("sampling rate must be positive"));
    }
    if let Some(&s) = path.iter().find(|&&s| s >= n_states) {
        return Err(Error::OutOfRange(format!("state {s} of {n_states}")));
    }
    let t = path.len() as f64;
    let rs = runs(path);
    let mut occupancy = vec![0usize; n_states];
    let mut visits: Vec<Vec<usize>> = vec![Vec::new(); n_states];
    let mut gaps: Vec<Vec<usize>> = vec![Vec::new(); n_states];
    let mut last_end: Vec<Option<usize>> = vec![None; n_states];
    for &(s, start, len) in &rs {
        occupancy[s] += len;
        visits[s].push(len);
        if let Some(end) = last_end[s] {
            gaps[s].push(start - end);
        }
        last_end[s] = Some(start + len);
    }
    let mean_s = |v: &Vec<usize>| (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64 / fs);
    Ok(StateStats {
        fractional_occupancy: occupancy.iter().map(|&n| n as f64 / t).collect(),
        mean_lifetime_s: visits.iter().map(mean_s).collect(),
        mean_interval_s: gaps.iter().map(mean_s).collect(),
        switching_rate: (rs.len() - 1) as f64 / (t - 1.0) * fs,
    })
}

/// Spectrum of the samples assigned to one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePsd {
    pub state: usize,
    pub freqs: Vec<f64>,
    /// channels × frequencies; `None` when no visit is long enough for one segment.
    pub power: Option<Array2<f64>>,
    pub n_segments: usize,
}

/// Welch spectra from non-overlapping `seg_len` segments cut inside each visit
/// of each state. `data` is channels × samples and aligned with `path`.
pub fn state_psd(path: &[usize], data: ArrayView2<f64>, n_states: usize, fs: f64, seg_len: usize) -> Result<Vec<StatePsd>> {
    if data.ncols() != path.len() {
        return Err(Error::shape(format!(
            "state path of {} samples for data of {}",
            path.len(),
            data.ncols()
        )));
    }
    if seg_len < 2 {
        return Err(Error::invalid("segment length must be at least 2"));
    }
    let rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
    let rs = runs(path);
    let mut out = Vec::with_capacity(n_states);
    for k in 0..n_states {
        let starts: Vec<usize> = rs
            .iter()
            .filter(|r| r.0 == k)
            .flat_map(|&(_, start, len)| (0..len / seg_len).map(move |i| start + i * seg_len))
            .collect();
        let mut power = None;
        let mut freqs = Vec::new();
        if !starts.is_empty() {
            let mut p = Array2::zeros((rows.len(), seg_len / 2 + 1));
            for (c, row) in rows.iter().enumerate() {
                let segs: Vec<&[f64]> = starts.iter().map(|&s| &row[s..s + seg_len]).collect();
                let (f, pw) = welch_segments(&segs, fs).expect("segments are non-empty and equal length");
                p.row_mut(c).assign(&ndarray::Array1::from(pw));
                freqs = f;
            }
            power = Some(p);
        }
        out.push(StatePsd {
            state: k,
            freqs,
            power,
            n_segments: starts.len(),
        });
    }
    Ok(out)
}

/// Trial-averaged state probabilities for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvokedStates {
    pub condition: u32,
    pub n_trials: usize,
    /// states × epoch samples
    pub mean: Array2<f64>,
    /// Across-trial standard deviation, states × epoch samples.
    pub std: Array2<f64>,
}

/// Epochs a state timecourse (samples × states, e.g. posteriors or a one-hot
/// path) around the onsets of `condition_track`. Row i of `timecourse` is
/// sample `offset + i` of the track.
pub fn evoked_state_timecourses(
    timecourse: ArrayView2<f64>,
    condition_track: &[u32],
    offset: usize,
    pre: usize,
    post: usize,
) -> Result<Vec<EvokedStates>> {
    let (t_len, k) = timecourse.dim();
    if offset + t_len > condition_track.len() {
        return Err(Error::shape("timecourse extends past the condition track"));
    }
    let len = pre + post;
    let mut by_cond: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (onset, cond) in find_onsets(condition_track) {
        if onset >= offset + pre && onset + post <= offset + t_len {
            by_cond.entry(cond).or_default().push(onset - offset - pre);
        }
    }
    let mut out = Vec::new();
    for (cond, starts) in by_cond {
        let n = starts.len() as f64;
        let mut mean = Array2::zeros((k, len));
        let mut sq = Array2::zeros((k, len));
        for &s in &starts {
            let ep = timecourse.slice(ndarray::s![s..s + len, ..]).t().to_owned();
            mean += &ep;
            sq += &ep.mapv(|v| v * v);
        }
        mean /= n;
        let var = sq / n - mean.mapv(|v| v * v);
        out.push(EvokedStates {
            condition: cond,
            n_trials: starts.len(),
            std: var.mapv(|v| v.max(0.0).sqrt()),
            mean,
        });
    }
    Ok(out)
}

/// One-hot encoding of a path, samples × states.
pub fn one_hot(path: &[usize], n_states: usize) -> Array2<f64> {
    Array2::from_shape_fn((path.len(), n_states), |(t, k)| if path[t] == k { 1.0 } else { 0.0 })
}

/// Assignment of each state of `a` to a distinct state of `b` maximising the
/// summed correlation of state means. Requires `b` to have at least as many states.
pub fn match_states(a: &HmmModel, b: &HmmModel) -> Result<Vec<usize>> {
    if a.dim() != b.dim() {
        return Err(Error::shape("models have different observation dimensions"));
    }
    if a.n_states() > b.n_states() {
        return Err(Error::invalid("the second model needs at least as many states"));
    }
    let scale = 1e9;
    let w = Matrix::from_fn(a.n_states(), b.n_states(), |(i, j)| {
        let r = pearson(&a.means.row(i).to_vec(), &b.means.row(j).to_vec());
        (r * scale).round() as i64
    });
    Ok(kuhn_munkres(&w).1)
}

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Window;
use crate::tokenize::TokenizedRecording;

/// Random training windows whose input length is drawn per batch from `[min_ctx, max_ctx]`.
///
/// Each window holds `len + 1` samples so that every input position has a target.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    min_ctx: usize,
    max_ctx: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(n_samples: usize, batch_size: usize, min_ctx: usize, max_ctx: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if min_ctx == 0 || min_ctx > max_ctx {
            return Err(Error::invalid(format!("bad context range {min_ctx}..={max_ctx}")));
        }
        if n_samples <= min_ctx {
            return Err(Error::invalid(format!(
                "{n_samples} samples cannot hold a context of {min_ctx} plus a target"
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            min_ctx,
            // short recordings cap the longest window
            max_ctx: max_ctx.min(n_samples - 1),
            batch_size,
        })
    }

    pub fn draw_len(&mut self) -> usize {
        self.rng.gen_range(self.min_ctx..=self.max_ctx)
    }

    pub fn next_batch(&mut self, data: &TokenizedRecording) -> Vec<Window> {
        let len = self.draw_len();
        let last_start = data.n_samples() - (len + 1);
        (0..self.batch_size)
            .map(|_| {
                let start = self.rng.gen_range(0..=last_start);
                window_at(data, start, len + 1)
            })
            .collect()
    }

    /// Continuous segments for the AR baseline, channels × (len + 1).
    pub fn next_segments(&mut self, data: &ndarray::Array2<f64>) -> Vec<ndarray::Array2<f64>> {
        let len = self.draw_len();
        let last_start = data.ncols() - (len + 1);
        (0..self.batch_size)
            .map(|_| {
                let start = self.rng.gen_range(0..=last_start);
                data.slice(s![.., start..start + len + 1]).to_owned()
            })
            .collect()
    }
}

pub(crate) fn window_at(data: &TokenizedRecording, start: usize, len: usize) -> Window {
    Window {
        tokens: data.tokens.slice(s![.., start..start + len]).to_owned(),
        condition: data.condition[start..start + len].to_vec(),
        subject: data.subject[start..start + len].to_vec(),
    }
}

/// Start indices of evaluation windows of `max_ctx + 1` samples that score every
/// target at or after `min_ctx` exactly once.
///
/// A final window aligned to the end covers the remainder; its overlap with the
/// previous window is scored twice.
pub fn evaluation_starts(n_samples: usize, min_ctx: usize, max_ctx: usize, limit: Option<usize>) -> Result<Vec<usize>> {
    if n_samples <= min_ctx {
        return Err(Error::invalid(format!(
            "{n_samples} samples cannot hold a context of {min_ctx} plus a target"
        )));
    }
    let len = (max_ctx + 1).min(n_samples);
    let stride = len - min_ctx;
    let mut starts: Vec<usize> = (0..=n_samples - len).step_by(stride).collect();
    let end = n_samples - len;
    if *starts.last().unwrap() != end {
        starts.push(end);
    }
    if let Some(k) = limit {
        if k == 0 {
            return Err(Error::invalid("evaluation window limit must be at least 1"));
        }
        if starts.len() > k {
            let n = starts.len();
            starts = (0..k).map(|i| starts[i * n / k]).collect();
        }
    }
    Ok(starts)
}

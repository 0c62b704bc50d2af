use ndarray::Array2;

use super::Recording;
use crate::error::{Error, Result};

/// Per-channel standardise → clip → max-abs scale, with statistics frozen at fit time.
///
/// Fit on the training split and apply the same transform to validation and
/// test data. Values that land outside [-1, 1] on unseen data are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Max |clipped z-score| per channel on the fit data.
    pub scale: Vec<f64>,
    pub clip: f64,
}

impl Preprocessor {
    pub fn fit(rec: &Recording, clip: f64) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(Error::invalid(format!("clip must be positive, got {clip}")));
        }
        check_finite(rec)?;
        let t = rec.n_samples();
        if t == 0 {
            return Err(Error::invalid("cannot fit preprocessing on an empty recording"));
        }
        let mut mean = Vec::with_capacity(rec.n_channels());
        let mut std = Vec::with_capacity(rec.n_channels());
        let mut scale = Vec::with_capacity(rec.n_channels());
        for (c, row) in rec.data.rows().into_iter().enumerate() {
            let m = row.iter().map(|&v| f64::from(v)).sum::<f64>() / t as f64;
            let var = row.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / t as f64;
            let sd = var.sqrt();
            if !(sd > 1e-12 * (1.0 + m.abs())) {
                return Err(Error::ZeroVariance(rec.channel_names[c].clone()));
            }
            let peak = row
                .iter()
                .map(|&v| ((f64::from(v) - m) / sd).clamp(-clip, clip).abs())
                .fold(0.0, f64::max);
            mean.push(m);
            std.push(sd);
            scale.push(peak);
        }
        Ok(Self {
            mean,
            std,
            scale,
            clip,
        })
    }

    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        if rec.n_channels() != self.mean.len() {
            return Err(Error::shape(format!(
                "preprocessor fitted on {} channels, got {}",
                self.mean.len(),
                rec.n_channels()
            )));
        }
        check_finite(rec)?;
        let mut out = Array2::<f32>::zeros(rec.data.dim());
        for (c, (src, mut dst)) in rec.data.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let (m, sd, sc) = (self.mean[c], self.std[c], self.scale[c]);
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                let z = ((f64::from(v) - m) / sd).clamp(-self.clip, self.clip);
                *d = (z / sc).clamp(-1.0, 1.0) as f32;
            }
        }
        Ok(Recording {
            data: out,
            fs: rec.fs,
            channel_names: rec.channel_names.clone(),
            condition: rec.condition.clone(),
            subject: rec.subject.clone(),
        })
    }
}

/// Fits on `rec` and applies to it in one go.
pub fn preprocess(rec: &Recording, clip: f64) -> Result<Recording> {
    Preprocessor::fit(rec, clip)?.apply(rec)
}

fn check_finite(rec: &Recording) -> Result<()> {
    for (c, row) in rec.data.rows().into_iter().enumerate() {
        if let Some(t) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite sample in channel '{}' at {t}",
                rec.channel_names[c]
            )));
        }
    }
    Ok(())
}

//! Recordings, preprocessing, epoching, spectra and the synthetic data generator.

mod epoch;
pub mod io;
mod preprocess;
mod spectral;
mod split;
pub mod synth;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub use epoch::{epoch, epoch_samples, find_onsets, EpochedData};
pub use preprocess::{preprocess, Preprocessor};
pub use spectral::{channel_covariance, welch_psd, welch_segments, PsdEstimate};
pub use split::{split_dataset, DatasetSplit, SplitPart};
pub use synth::{synthesize, SyntheticSpec};

/// A continuous multichannel recording with stimulus and subject label tracks.
///
/// Samples are held as `f32`, which is also the on-disk representation, so a
/// write/read cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Channels × samples.
    pub data: Array2<f32>,
    pub fs: f64,
    pub channel_names: Vec<String>,
    /// 0 = no stimulus, k ≥ 1 = condition k is on.
    pub condition: Vec<u32>,
    /// Subject index per sample, starting at 1.
    pub subject: Vec<u32>,
}

impl Recording {
    pub fn new(
        data: Array2<f32>,
        fs: f64,
        channel_names: Vec<String>,
        condition: Vec<u32>,
        subject: Vec<u32>,
    ) -> Result<Self> {
        let (c, t) = data.dim();
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        if channel_names.len() != c {
            return Err(Error::shape(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if condition.len() != t || subject.len() != t {
            return Err(Error::shape(format!(
                "label tracks of length {}/{} for {t} samples",
                condition.len(),
                subject.len()
            )));
        }
        if let Some(pos) = subject.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("subject index 0 at sample {pos}; subjects start at 1")));
        }
        Ok(Self {
            data,
            fs,
            channel_names,
            condition,
            subject,
        })
    }

    /// Recording without stimuli for a single subject, with generated channel names.
    pub fn unlabeled(data: Array2<f32>, fs: f64) -> Result<Self> {
        let (c, t) = data.dim();
        Self::new(data, fs, default_channel_names(c), vec![0; t], vec![1; t])
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_conditions(&self) -> u32 {
        self.condition.iter().copied().max().unwrap_or(0)
    }

    pub fn n_subjects(&self) -> u32 {
        self.subject.iter().copied().max().unwrap_or(1)
    }

    /// The data as `f64`, channels × samples.
    pub fn data_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.data.row(c).iter().map(|&v| f64::from(v)).collect()
    }

    /// Samples `range` of every channel and both label tracks.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Recording> {
        if range.start > range.end || range.end > self.n_samples() {
            return Err(Error::invalid(format!(
                "slice {range:?} outside 0..{}",
                self.n_samples()
            )));
        }
        Ok(Recording {
            data: self.data.slice(s![.., range.clone()]).to_owned(),
            fs: self.fs,
            channel_names: self.channel_names.clone(),
            condition: self.condition[range.clone()].to_vec(),
            subject: self.subject[range].to_vec(),
        })
    }

    /// Concatenates recordings along time. All parts must share channels and rate.
    pub fn concat(parts: &[Recording]) -> Result<Recording> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        for p in parts {
            if p.channel_names != first.channel_names || p.fs != first.fs {
                return Err(Error::shape("recordings differ in channels or sampling rate"));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Recording {
            data,
            fs: first.fs,
            channel_names: first.channel_names.clone(),
            condition: parts.iter().flat_map(|p| p.condition.iter().copied()).collect(),
            subject: parts.iter().flat_map(|p| p.subject.iter().copied()).collect(),
        })
    }

    pub(crate) fn from_f64(
        data: &Array2<f64>,
        fs: f64,
        channel_names: Vec<String>,
        condition: Vec<u32>,
        subject: Vec<u32>,
    ) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), fs, channel_names, condition, subject)
    }
}

pub fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i:03}")).collect()
}

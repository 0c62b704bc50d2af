use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::Recording;
use crate::error::{Error, Result};

/// One-sided power spectral density per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    /// channels × frequencies
    pub power: Array2<f64>,
}

impl PsdEstimate {
    pub fn bin_width(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// Index of the bin closest to `hz`.
    pub fn bin_of(&self, hz: f64) -> usize {
        let w = self.bin_width();
        if w == 0.0 {
            return 0;
        }
        ((hz / w).round() as usize).min(self.freqs.len() - 1)
    }

    /// Rectangle-rule integral of a channel's spectrum (≈ channel variance).
    pub fn total_power(&self, channel: usize) -> f64 {
        self.power.row(channel).sum() * self.bin_width()
    }
}

/// Periodogram machinery for a fixed segment length: Hann window, density scaling.
pub(crate) struct Periodogram {
    seg_len: usize,
    fs: f64,
    window: Vec<f64>,
    norm: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Periodogram {
    pub(crate) fn new(seg_len: usize, fs: f64) -> Self {
        // periodic Hann, as used by Welch estimators
        let window: Vec<f64> = (0..seg_len)
            .map(|n| {
                if seg_len == 1 {
                    1.0
                } else {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / seg_len as f64).cos()
                }
            })
            .collect();
        let norm = fs * window.iter().map(|w| w * w).sum::<f64>();
        let fft = FftPlanner::new().plan_fft_forward(seg_len);
        Self {
            seg_len,
            fs,
            window,
            norm,
            fft,
        }
    }

    pub(crate) fn n_freqs(&self) -> usize {
        self.seg_len / 2 + 1
    }

    pub(crate) fn freqs(&self) -> Vec<f64> {
        (0..self.n_freqs())
            .map(|k| k as f64 * self.fs / self.seg_len as f64)
            .collect()
    }

    /// Adds the one-sided periodogram of `seg` (mean-removed, windowed) to `acc`.
    pub(crate) fn accumulate(&self, seg: &[f64], acc: &mut [f64]) {
        debug_assert_eq!(seg.len(), self.seg_len);
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let mut buf: Vec<Complex<f64>> = seg
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new((x - mean) * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let nyquist = if self.seg_len % 2 == 0 {
            Some(self.seg_len / 2)
        } else {
            None
        };
        for (k, a) in acc.iter_mut().enumerate() {
            let mut p = buf[k].norm_sqr() / self.norm;
            if k != 0 && Some(k) != nyquist {
                p *= 2.0;
            }
            *a += p;
        }
    }
}

/// Welch estimate over all channels: Hann window, `overlap` ∈ [0, 1), mean over segments.
pub fn welch_psd(rec: &Recording, seg_len: usize, overlap: f64) -> Result<PsdEstimate> {
    welch_matrix(&rec.data_f64(), rec.fs, seg_len, overlap)
}

pub(crate) fn welch_matrix(
    data: &Array2<f64>,
    fs: f64,
    seg_len: usize,
    overlap: f64,
) -> Result<PsdEstimate> {
    let t = data.ncols();
    if seg_len == 0 || seg_len > t {
        return Err(Error::invalid(format!(
            "segment length {seg_len} must be in 1..={t}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap {overlap} must be in [0, 1)")));
    }
    let step = ((seg_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let pg = Periodogram::new(seg_len, fs);
    let nf = pg.n_freqs();
    let mut power = Array2::zeros((data.nrows(), nf));
    for (c, row) in data.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        let mut acc = vec![0.0; nf];
        let mut n = 0usize;
        let mut start = 0;
        while start + seg_len <= t {
            pg.accumulate(&x[start..start + seg_len], &mut acc);
            n += 1;
            start += step;
        }
        for (k, a) in acc.into_iter().enumerate() {
            power[[c, k]] = a / n as f64;
        }
    }
    Ok(PsdEstimate {
        freqs: pg.freqs(),
        power,
    })
}

/// Averages periodograms over caller-supplied segments of equal length.
///
/// Returns `None` when no segments are given. Used for masked (per-state) spectra.
pub fn welch_segments(segments: &[&[f64]], fs: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let seg_len = segments.first()?.len();
    if seg_len == 0 || segments.iter().any(|s| s.len() != seg_len) {
        return None;
    }
    let pg = Periodogram::new(seg_len, fs);
    let mut acc = vec![0.0; pg.n_freqs()];
    for s in segments {
        pg.accumulate(s, &mut acc);
    }
    for a in &mut acc {
        *a /= segments.len() as f64;
    }
    Some((pg.freqs(), acc))
}

/// Channel covariance with 1/T normalisation.
pub fn channel_covariance(rec: &Recording) -> Array2<f64> {
    covariance_matrix(&rec.data_f64())
}

pub(crate) fn covariance_matrix(data: &Array2<f64>) -> Array2<f64> {
    let (c, t) = data.dim();
    let mut centred = data.clone();
    for mut row in centred.rows_mut() {
        let m = row.sum() / t.max(1) as f64;
        row.mapv_inplace(|v| v - m);
    }
    let mut cov = centred.dot(&centred.t()) / t.max(1) as f64;
    for i in 0..c {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(c: usize, t: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((c, t), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn sinusoid_peak_at_its_frequency() {
        let fs = 100.0;
        let data = Array2::from_shape_fn((1, 2000), |(_, t)| {
            (2.0 * std::f64::consts::PI * 10.0 * t as f64 / fs).sin()
        });
        let psd = welch_matrix(&data, fs, 200, 0.5).unwrap();
        let (argmax, _) = psd
            .power
            .row(0)
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
        assert_eq!(psd.freqs[argmax], 10.0);
    }

    #[test]
    fn white_noise_is_flat_and_integrates_to_variance() {
        let data = noise(1, 200_000, 7);
        let psd = welch_matrix(&data, 100.0, 200, 0.5).unwrap();
        let row = psd.power.row(0);
        let inner = &row.as_slice().unwrap()[1..row.len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        for &p in inner {
            let db = 10.0 * (p / mean).log10();
            assert!(db.abs() < 3.0, "bin deviates by {db} dB");
        }
        assert!((psd.total_power(0) - 1.0).abs() < 0.1);
        assert!(psd.freqs.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*psd.freqs.last().unwrap(), 50.0);
    }

    #[test]
    fn zero_signal_zero_power() {
        let psd = welch_matrix(&Array2::zeros((2, 400)), 100.0, 200, 0.5).unwrap();
        assert!(psd.power.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn segment_longer_than_series_is_an_error() {
        assert!(welch_matrix(&Array2::zeros((1, 10)), 100.0, 11, 0.5).is_err());
    }

    #[test]
    fn covariance_matches_double_loop() {
        for (c, t, seed) in [(1, 2, 1), (3, 7, 2), (4, 50, 3), (2, 13, 4)] {
            let data = noise(c, t, seed);
            let cov = covariance_matrix(&data);
            let mean: Vec<f64> = (0..c).map(|i| data.row(i).sum() / t as f64).collect();
            for i in 0..c {
                for j in 0..c {
                    let mut s = 0.0;
                    for k in 0..t {
                        s += (data[[i, k]] - mean[i]) * (data[[j, k]] - mean[j]);
                    }
                    assert!((cov[[i, j]] - s / t as f64).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identical_channels_fully_covariant() {
        let mut data = noise(2, 100, 9);
        let r0 = data.row(0).to_owned();
        data.row_mut(1).assign(&r0);
        let cov = covariance_matrix(&data);
        assert!((cov[[0, 1]] - cov[[0, 0]]).abs() < 1e-12);
        assert!((cov[[0, 1]] - cov[[1, 1]]).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_has_small_off_diagonal() {
        let t = 40_000;
        let cov = covariance_matrix(&noise(3, t, 11));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(cov[[i, j]].abs() < 3.0 / (t as f64).sqrt());
                }
                assert_eq!(cov[[i, j]], cov[[j, i]]);
            }
        }
    }
}

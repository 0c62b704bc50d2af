//! Seeded generator of MEG-like data: 1/f background, narrowband oscillations
//! and condition-locked evoked responses on a trial schedule.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{default_channel_names, Recording};
use crate::error::{Error, Result};

/// A stochastic oscillation shared by all channels with a per-channel phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationPeak {
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Spectral width of the resonance; smaller is more sinusoidal.
    pub bandwidth_hz: f64,
    /// Phase per channel in radians; empty draws them from the seed.
    pub channel_phase: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Onset,
    Offset,
}

/// Gaussian bump at `latency_s` after the stimulus onset or offset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvokedComponent {
    pub anchor: Anchor,
    pub latency_s: f64,
    pub width_s: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvokedTemplate {
    pub components: Vec<EvokedComponent>,
    /// Gain per channel.
    pub spatial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSchedule {
    /// How long the stimulus stays on.
    pub trial_duration_s: f64,
    pub iti_s: f64,
    /// Uniform extra gap in [0, jitter) added to each inter-trial interval.
    pub iti_jitter_s: f64,
    /// Stimulus-free time before the first trial.
    pub lead_in_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_channels: usize,
    pub fs: f64,
    pub duration_s: f64,
    pub peaks: Vec<OscillationPeak>,
    /// Exponent α of the 1/f^α background.
    pub noise_exponent: f64,
    pub noise_amplitude: f64,
    /// Fraction of background variance shared within a channel group.
    pub shared_noise: f64,
    pub noise_groups: usize,
    pub n_conditions: usize,
    /// One template per condition.
    pub evoked: Vec<EvokedTemplate>,
    pub schedule: TrialSchedule,
    pub n_subjects: usize,
    /// Log-normal spread of the per-subject evoked gain.
    pub subject_effect: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale default at 100 Hz: 10 Hz and 19 Hz rhythms, and evoked
    /// templates that differ in sign and latency between conditions so that
    /// their average over conditions is zero for multiples of four conditions.
    pub fn desk(n_channels: usize, n_conditions: usize, duration_s: f64, seed: u64) -> Self {
        let evoked = (0..n_conditions)
            .map(|i| {
                let sign_on = if i % 2 == 0 { 1.0 } else { -1.0 };
                let sign_off = if (i / 2) % 2 == 0 { sign_on } else { -sign_on };
                let latency = 0.12 + 0.13 * ((i / 2) % 2) as f64 + 0.02 * (i / 4) as f64;
                EvokedTemplate {
                    components: vec![
                        EvokedComponent {
                            anchor: Anchor::Onset,
                            latency_s: latency,
                            width_s: 0.04,
                            amplitude: 1.5 * sign_on,
                        },
                        EvokedComponent {
                            anchor: Anchor::Offset,
                            latency_s: 0.12,
                            width_s: 0.04,
                            amplitude: 1.0 * sign_off,
                        },
                    ],
                    spatial: (0..n_channels)
                        .map(|c| if 2 * c >= n_channels { 1.0 } else { 0.15 })
                        .collect(),
                }
            })
            .collect();
        Self {
            n_channels,
            fs: 100.0,
            duration_s,
            peaks: vec![
                OscillationPeak {
                    freq_hz: 10.0,
                    amplitude: 1.0,
                    bandwidth_hz: 1.0,
                    channel_phase: Vec::new(),
                },
                OscillationPeak {
                    freq_hz: 19.0,
                    amplitude: 0.6,
                    bandwidth_hz: 1.5,
                    channel_phase: Vec::new(),
                },
            ],
            noise_exponent: 1.0,
            noise_amplitude: 0.7,
            shared_noise: 0.3,
            noise_groups: 2,
            n_conditions,
            evoked,
            schedule: TrialSchedule {
                trial_duration_s: 0.5,
                iti_s: 1.0,
                iti_jitter_s: 0.3,
                lead_in_s: 1.0,
            },
            n_subjects: 1,
            subject_effect: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::invalid("n_channels must be ≥ 1"));
        }
        if !(self.fs > 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::invalid("fs and duration must be positive"));
        }
        let s = &self.schedule;
        if !(s.trial_duration_s > 0.0) || !(s.iti_s > 0.0) || s.iti_jitter_s < 0.0 || s.lead_in_s < 0.0 {
            return Err(Error::invalid("trial duration and ITI must be positive"));
        }
        for p in &self.peaks {
            if p.freq_hz <= 0.0 || p.freq_hz >= self.fs / 2.0 {
                return Err(Error::invalid(format!(
                    "peak at {} Hz is not below the Nyquist frequency {} Hz",
                    p.freq_hz,
                    self.fs / 2.0
                )));
            }
            if !(p.bandwidth_hz > 0.0) {
                return Err(Error::invalid("peak bandwidth must be positive"));
            }
            if !p.channel_phase.is_empty() && p.channel_phase.len() != self.n_channels {
                return Err(Error::shape("channel_phase length must equal n_channels"));
            }
        }
        if self.evoked.len() != self.n_conditions {
            return Err(Error::shape(format!(
                "{} evoked templates for {} conditions",
                self.evoked.len(),
                self.n_conditions
            )));
        }
        for t in &self.evoked {
            if t.spatial.len() != self.n_channels {
                return Err(Error::shape("evoked spatial profile length must equal n_channels"));
            }
            if t.components.iter().any(|c| !(c.width_s > 0.0)) {
                return Err(Error::invalid("evoked component width must be positive"));
            }
        }
        if self.n_subjects == 0 || self.noise_groups == 0 {
            return Err(Error::invalid("n_subjects and noise_groups must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.shared_noise) {
            return Err(Error::invalid("shared_noise must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    fn trial_samples(&self) -> usize {
        ((self.schedule.trial_duration_s * self.fs).round() as usize).max(1)
    }

    /// Clean evoked response (channels × `len`) for a trial whose onset is at
    /// sample `pre` and whose stimulus lasts `trial_duration_s`, including the
    /// subject gain.
    pub fn evoked_template(
        &self,
        condition: u32,
        subject_gain: f64,
        trial_duration_s: f64,
        pre: usize,
        len: usize,
    ) -> Result<Array2<f64>> {
        let k = condition as usize;
        if k == 0 || k > self.n_conditions {
            return Err(Error::UnknownLabel(format!("condition {condition}")));
        }
        let tpl = &self.evoked[k - 1];
        let mut out = Array2::zeros((self.n_channels, len));
        for i in 0..len {
            let dt = (i as f64 - pre as f64) / self.fs;
            let v = subject_gain * waveform(tpl, dt, trial_duration_s);
            for c in 0..self.n_channels {
                out[[c, i]] = v * tpl.spatial[c];
            }
        }
        Ok(out)
    }

    /// Onsets and conditions the generator will place, in time order, and the
    /// per-subject evoked gains. Conditions are presented in shuffled blocks
    /// that contain every condition once.
    fn plan(&self, rng: &mut ChaCha8Rng) -> (Vec<(usize, u32)>, Vec<f64>) {
        let n = self.n_samples();
        let s = &self.schedule;
        let trial = self.trial_samples();
        let mut onsets = Vec::new();
        let mut block: Vec<u32> = Vec::new();
        let mut t = (s.lead_in_s * self.fs).round() as usize;
        if self.n_conditions > 0 {
            while t + trial < n {
                if block.is_empty() {
                    block = (1..=self.n_conditions as u32).collect();
                    block.shuffle(rng);
                    block.reverse();
                }
                let k = block.pop().expect("refilled above");
                onsets.push((t, k));
                let jitter = if s.iti_jitter_s > 0.0 {
                    rng.gen_range(0.0..s.iti_jitter_s)
                } else {
                    0.0
                };
                t += trial + ((s.iti_s + jitter) * self.fs).round().max(1.0) as usize;
            }
        }
        let gains = (0..self.n_subjects)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (self.subject_effect * z).exp()
            })
            .collect();
        (onsets, gains)
    }

    /// Stimulus onsets that [`synthesize`] places for this spec.
    pub fn scheduled_onsets(&self) -> Vec<(usize, u32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.plan(&mut rng).0
    }

    /// Evoked gain of each subject (index 0 = subject 1).
    pub fn subject_gains(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.plan(&mut rng).1
    }
}

fn waveform(tpl: &EvokedTemplate, dt: f64, trial_duration_s: f64) -> f64 {
    // responses never precede the stimulus
    if dt < 0.0 {
        return 0.0;
    }
    tpl.components
        .iter()
        .map(|c| {
            let anchor = match c.anchor {
                Anchor::Onset => 0.0,
                Anchor::Offset => trial_duration_s,
            };
            let z = (dt - anchor - c.latency_s) / c.width_s;
            c.amplitude * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Generates a recording from `spec`. Bit-identical for equal specs.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Recording> {
    spec.validate()?;
    let n = spec.n_samples();
    let c_count = spec.n_channels;
    if n < 2 {
        return Err(Error::invalid("duration too short for a single sample pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (onsets, gains) = spec.plan(&mut rng);

    let mut data = Array2::<f64>::zeros((c_count, n));

    // background: independent per channel plus a shared part per group
    let group_noise: Vec<Vec<f64>> = (0..spec.noise_groups)
        .map(|_| power_law_noise(n, spec.noise_exponent, &mut rng))
        .collect();
    let shared = spec.shared_noise.sqrt();
    let own = (1.0 - spec.shared_noise).sqrt();
    for c in 0..c_count {
        let g = c * spec.noise_groups / c_count;
        let own_noise = power_law_noise(n, spec.noise_exponent, &mut rng);
        for t in 0..n {
            data[[c, t]] = spec.noise_amplitude * (own * own_noise[t] + shared * group_noise[g][t]);
        }
    }

    for peak in &spec.peaks {
        let phases: Vec<f64> = if peak.channel_phase.is_empty() {
            (0..c_count).map(|_| rng.gen_range(0.0..2.0 * PI)).collect()
        } else {
            peak.channel_phase.clone()
        };
        let osc = resonator(n, peak.freq_hz, peak.bandwidth_hz, spec.fs, &mut rng);
        for c in 0..c_count {
            let rot = Complex::from_polar(1.0, phases[c]);
            for t in 0..n {
                data[[c, t]] += peak.amplitude * std::f64::consts::SQRT_2 * (osc[t] * rot).re;
            }
        }
    }

    let mut condition = vec![0u32; n];
    let subject: Vec<u32> = (0..n)
        .map(|t| (t * spec.n_subjects / n) as u32 + 1)
        .collect();
    let trial = spec.trial_samples();
    let tail = spec
        .evoked
        .iter()
        .flat_map(|tpl| tpl.components.iter())
        .map(|c| {
            let anchor = match c.anchor {
                Anchor::Onset => 0.0,
                Anchor::Offset => spec.schedule.trial_duration_s,
            };
            anchor + c.latency_s + 8.0 * c.width_s
        })
        .fold(0.0, f64::max);
    let reach = (tail * spec.fs).ceil() as usize + 1;
    for &(onset, k) in &onsets {
        for v in &mut condition[onset..(onset + trial).min(n)] {
            *v = k;
        }
        let tpl = &spec.evoked[k as usize - 1];
        let gain = gains[subject[onset] as usize - 1];
        for t in onset..(onset + reach).min(n) {
            let dt = (t - onset) as f64 / spec.fs;
            let v = gain * waveform(tpl, dt, spec.schedule.trial_duration_s);
            for c in 0..c_count {
                data[[c, t]] += v * tpl.spatial[c];
            }
        }
    }

    Recording::from_f64(&data, spec.fs, default_channel_names(c_count), condition, subject)
}

/// Unit-variance noise with a 1/f^α power spectrum.
fn power_law_noise(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64;
        *v = if f == 0.0 {
            Complex::new(0.0, 0.0)
        } else {
            *v * f.powf(-alpha / 2.0)
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut x: Vec<f64> = buf.iter().map(|v| v.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    for v in &mut x {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    x
}

/// Complex AR(1) resonator with unit mean-square modulus.
fn resonator(n: usize, freq: f64, bandwidth: f64, fs: f64, rng: &mut ChaCha8Rng) -> Vec<Complex<f64>> {
    let rho = (-PI * bandwidth / fs).exp();
    let pole = Complex::from_polar(rho, 2.0 * PI * freq / fs);
    let drive = ((1.0 - rho * rho) / 2.0).sqrt();
    let mut z = Complex::new(
        rng.sample::<f64, _>(StandardNormal) / std::f64::consts::SQRT_2,
        rng.sample::<f64, _>(StandardNormal) / std::f64::consts::SQRT_2,
    );
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let e = Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        z = pole * z + e * drive;
        out.push(z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{epoch_samples, welch_psd};

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec::desk(4, 2, 30.0, 5);
        assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 6;
        assert_ne!(synthesize(&spec).unwrap().data, synthesize(&other).unwrap().data);
    }

    #[test]
    fn peak_at_nyquist_rejected() {
        let mut spec = SyntheticSpec::desk(2, 1, 10.0, 1);
        spec.peaks[0].freq_hz = 50.0;
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn spectral_peaks_at_10_and_19_hz() {
        let mut spec = SyntheticSpec::desk(3, 2, 400.0, 2);
        spec.evoked.iter_mut().for_each(|t| t.components.clear());
        let rec = synthesize(&spec).unwrap();
        let psd = welch_psd(&rec, 200, 0.5).unwrap();
        for c in 0..3 {
            for target in [10.0, 19.0] {
                let k = psd.bin_of(target);
                let row = psd.power.row(c);
                let local = (k - 2..=k + 2).map(|i| row[i]).fold(0.0, f64::max);
                assert!(local > row[k - 2 - 4] && local > row[k + 2 + 4], "no peak near {target} Hz on {c}");
                // local maximum within ±1 Hz
                let best = (k - 2..=k + 2).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert!(row[best] > row[best - 1] && row[best] > row[best + 1]);
            }
        }
    }

    #[test]
    fn epoching_recovers_every_scheduled_trial() {
        let spec = SyntheticSpec::desk(2, 4, 120.0, 3);
        let rec = synthesize(&spec).unwrap();
        let scheduled = spec.scheduled_onsets();
        let ep = epoch_samples(&rec, 20, 100).unwrap();
        assert_eq!(ep.dropped, 0);
        assert_eq!(ep.n_trials(), scheduled.len());
        assert_eq!(
            ep.onsets.iter().zip(&ep.conditions).map(|(&o, &k)| (o, k)).collect::<Vec<_>>(),
            scheduled
        );
    }

    #[test]
    fn zero_evoked_amplitude_averages_to_noise() {
        let mut spec = SyntheticSpec::desk(2, 1, 600.0, 4);
        for t in &mut spec.evoked {
            for c in &mut t.components {
                c.amplitude = 0.0;
            }
        }
        let rec = synthesize(&spec).unwrap();
        let ep = epoch_samples(&rec, 0, 100).unwrap();
        let n = ep.n_trials() as f64;
        assert!(n > 300.0);
        let all: Vec<usize> = (0..ep.n_trials()).collect();
        let mean = ep.mean_of(&all);
        let var = ep.variance_of(&all);
        let mut violations = 0;
        for (m, v) in mean.iter().zip(var.iter()) {
            let sem = (v * n / (n - 1.0)).sqrt() / n.sqrt();
            if m.abs() >= 3.0 * sem {
                violations += 1;
            }
        }
        // at most a handful of 3σ excursions among 200 samples
        assert!(violations <= 3, "{violations} samples exceed 3 sem");
    }

    #[test]
    fn subject_track_is_blocked() {
        let mut spec = SyntheticSpec::desk(2, 2, 20.0, 8);
        spec.n_subjects = 3;
        spec.subject_effect = 0.5;
        let rec = synthesize(&spec).unwrap();
        assert_eq!(rec.n_subjects(), 3);
        assert!(rec.subject.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!(spec.subject_gains().len(), 3);
    }

    #[test]
    fn evoked_template_matches_injected_response() {
        let mut spec = SyntheticSpec::desk(2, 1, 60.0, 9);
        spec.peaks.clear();
        spec.noise_amplitude = 0.0;
        let rec = synthesize(&spec).unwrap();
        let ep = epoch_samples(&rec, 10, 90).unwrap();
        let tpl = spec.evoked_template(1, 1.0, 0.5, 10, 100).unwrap();
        let e0 = ep.epochs.index_axis(ndarray::Axis(0), 1);
        for (a, b) in e0.iter().zip(tpl.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

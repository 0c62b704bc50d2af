use ndarray::{Array2, ArrayView2};

use super::pearson;
use crate::error::{Error, Result};
use crate::signal::{channel_covariance, welch_psd, EpochedData, Recording};

/// Per-channel spectral agreement between a generated and a reference recording.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdComparison {
    pub freqs: Vec<f64>,
    pub generated: Array2<f64>,
    pub reference: Array2<f64>,
    /// Root-mean-square difference of the two spectra in dB.
    pub log_spectral_distance: Vec<f64>,
    /// Frequency of the largest non-DC bin.
    pub peak_generated: Vec<f64>,
    pub peak_reference: Vec<f64>,
    /// generated − reference peak frequency.
    pub peak_delta: Vec<f64>,
}

impl PsdComparison {
    pub fn mean_distance(&self) -> f64 {
        let d = &self.log_spectral_distance;
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }
}

fn check_pair(generated: &Recording, reference: &Recording) -> Result<()> {
    if generated.n_channels() != reference.n_channels() {
        return Err(Error::shape(format!(
            "{} generated channels vs {} reference channels",
            generated.n_channels(),
            reference.n_channels()
        )));
    }
    if generated.fs != reference.fs {
        return Err(Error::shape(format!(
            "sampling rates differ: {} vs {}",
            generated.fs, reference.fs
        )));
    }
    Ok(())
}

fn peak_freq(freqs: &[f64], power: &[f64]) -> f64 {
    let mut best = 1.min(power.len() - 1);
    for k in best..power.len() {
        if power[k] > power[best] {
            best = k;
        }
    }
    freqs[best]
}

/// Welch spectra of both recordings and their per-channel distances.
pub fn psd_compare(generated: &Recording, reference: &Recording, seg_len: usize) -> Result<PsdComparison> {
    check_pair(generated, reference)?;
    let g = welch_psd(generated, seg_len, 0.5)?;
    let r = welch_psd(reference, seg_len, 0.5)?;
    let floor = 1e-30;
    let mut lsd = Vec::new();
    let (mut pg, mut pr) = (Vec::new(), Vec::new());
    for c in 0..generated.n_channels() {
        let (gr, rr) = (g.power.row(c), r.power.row(c));
        let sq: f64 = gr
            .iter()
            .zip(rr.iter())
            .map(|(a, b)| {
                let d = 10.0 * ((a + floor) / (b + floor)).log10();
                d * d
            })
            .sum();
        lsd.push((sq / gr.len() as f64).sqrt());
        pg.push(peak_freq(&g.freqs, gr.as_slice().unwrap()));
        pr.push(peak_freq(&r.freqs, rr.as_slice().unwrap()));
    }
    let peak_delta = pg.iter().zip(&pr).map(|(a, b)| a - b).collect();
    Ok(PsdComparison {
        freqs: g.freqs,
        generated: g.power,
        reference: r.power,
        log_spectral_distance: lsd,
        peak_generated: pg,
        peak_reference: pr,
        peak_delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceComparison {
    pub generated: Array2<f64>,
    pub reference: Array2<f64>,
    /// ‖G − R‖_F
    pub frobenius: f64,
    /// ‖G − R‖_F / ‖R‖_F
    pub relative_frobenius: f64,
    /// (i, j, generated, reference) for every channel pair i < j.
    pub pairs: Vec<(usize, usize, f64, f64)>,
    pub mean_abs_offdiag_generated: f64,
    pub mean_abs_offdiag_reference: f64,
}

pub fn covariance_compare(generated: &Recording, reference: &Recording) -> Result<CovarianceComparison> {
    check_pair(generated, reference)?;
    let g = channel_covariance(generated);
    let r = channel_covariance(reference);
    let diff = &g - &r;
    let frob = diff.mapv(|v| v * v).sum().sqrt();
    let rn = r.mapv(|v| v * v).sum().sqrt();
    let c = g.nrows();
    let mut pairs = Vec::new();
    for i in 0..c {
        for j in i + 1..c {
            pairs.push((i, j, g[[i, j]], r[[i, j]]));
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(CovarianceComparison {
        frobenius: frob,
        relative_frobenius: if rn > 0.0 { frob / rn } else { frob },
        mean_abs_offdiag_generated: pairs.iter().map(|p| p.2.abs()).sum::<f64>() / n,
        mean_abs_offdiag_reference: pairs.iter().map(|p| p.3.abs()).sum::<f64>() / n,
        pairs,
        generated: g,
        reference: r,
    })
}

/// Per-channel correlation of two channels × samples arrays.
pub fn evoked_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| pearson(&x.to_vec(), &y.to_vec()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEvoked {
    pub condition: u32,
    pub n_generated: usize,
    pub n_reference: usize,
    pub mean_generated: Array2<f64>,
    pub mean_reference: Array2<f64>,
    pub var_generated: Array2<f64>,
    pub var_reference: Array2<f64>,
    /// Per channel.
    pub mean_corr: Vec<f64>,
    pub var_corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvokedReport {
    pub conditions: Vec<ConditionEvoked>,
    /// Conditions present in only one of the inputs.
    pub excluded: Vec<u32>,
    /// Per-channel correlation of the condition-averaged mean and variance.
    pub grand_mean_corr: Vec<f64>,
    pub grand_var_corr: Vec<f64>,
}

impl EvokedReport {
    /// Mean of the per-condition mean-evoked correlations over the given channels.
    pub fn mean_corr_over(&self, channels: &[usize]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for c in &self.conditions {
            for &ch in channels {
                acc += c.mean_corr[ch];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// Trial statistics per condition for both epoch sets and their per-channel
/// correlations. Conditions missing from either side are listed and skipped.
pub fn evoked_analysis(generated: &EpochedData, reference: &EpochedData) -> Result<EvokedReport> {
    if generated.n_channels() != reference.n_channels() || generated.epoch_len() != reference.epoch_len() {
        return Err(Error::shape("epoch geometry differs between generated and reference data"));
    }
    let gs = generated.condition_set();
    let rs = reference.condition_set();
    let mut excluded: Vec<u32> = gs.iter().chain(&rs).copied().filter(|k| !(gs.contains(k) && rs.contains(k))).collect();
    excluded.sort_unstable();
    excluded.dedup();
    let mut conditions = Vec::new();
    let (mut gm, mut rm, mut gv, mut rv) = (
        Array2::zeros((generated.n_channels(), generated.epoch_len())),
        Array2::zeros((generated.n_channels(), generated.epoch_len())),
        Array2::zeros((generated.n_channels(), generated.epoch_len())),
        Array2::zeros((generated.n_channels(), generated.epoch_len())),
    );
    for &k in gs.iter().filter(|k| rs.contains(k)) {
        let (tg, tr) = (generated.trials_of(k), reference.trials_of(k));
        let (mg, mr) = (generated.mean_of(&tg), reference.mean_of(&tr));
        let (vg, vr) = (generated.variance_of(&tg), reference.variance_of(&tr));
        gm += &mg;
        rm += &mr;
        gv += &vg;
        rv += &vr;
        conditions.push(ConditionEvoked {
            condition: k,
            n_generated: tg.len(),
            n_reference: tr.len(),
            mean_corr: evoked_correlation(mg.view(), mr.view())?,
            var_corr: evoked_correlation(vg.view(), vr.view())?,
            mean_generated: mg,
            mean_reference: mr,
            var_generated: vg,
            var_reference: vr,
        });
    }
    if conditions.is_empty() {
        return Err(Error::invalid("no condition is present in both inputs"));
    }
    Ok(EvokedReport {
        grand_mean_corr: evoked_correlation(gm.view(), rm.view())?,
        grand_var_corr: evoked_correlation(gv.view(), rv.view())?,
        conditions,
        excluded,
    })
}

//! Comparison of generated and real data: forecast metrics, spectra,
//! covariance, evoked responses, HMM state dynamics and embedding geometry.

mod compare;
mod geometry;
mod hmm;
mod metrics;
mod report;
mod states;
mod tde;

pub use compare::{
    covariance_compare, evoked_analysis, evoked_correlation, psd_compare, ConditionEvoked, CovarianceComparison,
    EvokedReport, PsdComparison,
};
pub use geometry::{distance_correlation, embedding_geometry, pca_2d, EmbeddingGeometry};
pub use hmm::{fit_hmm, HmmConfig, HmmFit, HmmModel};
pub use metrics::{
    distance_rank, forecast_metrics, forecast_metrics_ar, random_prediction_accuracy, rank_of, ForecastMetrics,
    MetricAccumulator, MetricSet,
};
pub use report::EvalReport;
pub use states::{
    one_hot, runs,
    evoked_state_timecourses, match_states, state_psd, summary_stats, EvokedStates, StatePsd, StateStats,
};
pub use tde::{tde_embed, TdeEmbedding};

/// Pearson correlation. Two constant inputs that are equal count as perfectly
/// correlated; a constant against a varying input gives 0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let scale = ma.abs().max(mb.abs()).max(1.0);
    let tiny = 1e-24 * scale * scale * n as f64;
    if saa <= tiny || sbb <= tiny {
        return if saa <= tiny && sbb <= tiny && a[..n] == b[..n] { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

use rand::Rng;

use crate::error::{Error, Result};

/// Slack when comparing cumulative mass with `p`, so that a prefix summing to
/// p up to rounding counts as reaching it.
const MASS_TOL: f64 = 1e-12;

/// Nucleus filter: keeps the smallest set of most probable entries whose mass
/// reaches `p`, zeroes the rest and renormalises.
///
/// Entries are ranked by probability with ties going to the lower index.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    let keep = nucleus(probs, p)?;
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &keep {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Indices of the nucleus in descending-probability order.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("top-p mass must be in (0, 1], got {p}")));
    }
    if probs.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if probs.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("distribution sums to {total}, not 1")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: equal probabilities keep ascending index order
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut cum = 0.0;
    let mut n = order.len();
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= p * total - MASS_TOL {
            n = k + 1;
            break;
        }
    }
    order.truncate(n);
    Ok(order)
}

/// Draws one index from the top-p nucleus of `probs`.
pub fn sample_top_p<R: Rng>(probs: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    let keep = nucleus(probs, p)?;
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    if keep.len() == 1 || mass == 0.0 {
        return Ok(keep[0]);
    }
    let u: f64 = rng.gen::<f64>() * mass;
    let mut cum = 0.0;
    for &i in &keep {
        cum += probs[i];
        if u < cum {
            return Ok(i);
        }
    }
    Ok(*keep.last().unwrap())
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_example() {
        let f = top_p_filter(&[0.5, 0.3, 0.15, 0.05], 0.8).unwrap();
        assert!((f[0] - 0.625).abs() < 1e-12 && (f[1] - 0.375).abs() < 1e-12);
        assert_eq!(&f[2..], &[0.0, 0.0]);
    }

    #[test]
    fn one_hot_is_unchanged() {
        for p in [0.01, 0.5, 1.0] {
            assert_eq!(top_p_filter(&[0.0, 1.0, 0.0], p).unwrap(), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn full_mass_is_identity() {
        let d = [0.1, 0.2, 0.3, 0.4];
        let f = top_p_filter(&d, 1.0).unwrap();
        for (a, b) in d.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_p_is_greedy_with_low_index_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_top_p(&[0.2, 0.4, 0.4], 1e-9, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(top_p_filter(&[0.5, 0.4], 0.8).is_err());
        assert!(top_p_filter(&[0.5, 0.5], 0.0).is_err());
        assert!(top_p_filter(&[0.5, 0.5], 1.5).is_err());
        assert!(top_p_filter(&[1.5, -0.5], 0.5).is_err());
        assert!(top_p_filter(&[0.5, 0.50009], 0.5).is_ok());
    }

    #[test]
    fn samples_stay_in_the_nucleus() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 * 0.4).collect();
        let probs = softmax(&logits);
        let support = nucleus(&probs, 0.8).unwrap();
        for _ in 0..10_000 {
            let k = sample_top_p(&probs, 0.8, &mut rng).unwrap();
            assert!(support.contains(&k));
        }
    }

    proptest! {
        #[test]
        fn filtered_is_a_distribution(raw in proptest::collection::vec(0.0f64..1.0, 1..40), p in 0.01f64..=1.0) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let probs: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let f = top_p_filter(&probs, p).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let kept: f64 = probs.iter().zip(&f).filter(|(_, &v)| v > 0.0).map(|(a, _)| a).sum();
            prop_assert!(kept >= p - 1e-9 || f.iter().filter(|&&v| v > 0.0).count() == probs.iter().filter(|&&v| v > 0.0).count());
            // every kept entry is at least as probable as every dropped one
            let min_kept = probs.iter().zip(&f).filter(|(_, &v)| v > 0.0).map(|(a, _)| *a).fold(f64::INFINITY, f64::min);
            let max_dropped = probs.iter().zip(&f).filter(|(_, &v)| v == 0.0).map(|(a, _)| *a).fold(0.0, f64::max);
            prop_assert!(min_kept >= max_dropped);
        }
    }
}

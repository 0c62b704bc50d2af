use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::models::{GptSpec, Model, ModelSpec};
use crate::signal::EpochedData;
use crate::tokenize::{Codec, MuLawCodec, TokenizedRecording};
use crate::Error;

/// Each stream emits token 1 with probability `p[label]` independently of the past.
struct Coin {
    p: Vec<f64>,
}

impl ConditionalForecaster for Coin {
    fn step_log_probs(&self, tokens: &Array2<u32>, condition: &[u32], _: &[u32]) -> crate::Result<Vec<f64>> {
        Ok((1..tokens.ncols())
            .map(|t| {
                let p = self.p[condition[t - 1] as usize];
                tokens.column(t).iter().map(|&z| if z == 1 { p.ln() } else { (1.0 - p).ln() }).sum()
            })
            .collect())
    }
}

#[test]
fn two_candidate_example() {
    let inc = Array2::from_shape_vec((1, 2), vec![0.02f64.ln(), 0.01f64.ln()]).unwrap();
    let (_, post, ev) = posterior_from_increments(&[1, 2], &inc, &[0.5, 0.5]).unwrap();
    assert!((post[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
    assert!((post[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
    assert!((ev[0] - 0.015f64.ln()).abs() < 1e-12);
}

#[test]
fn prior_must_be_a_distribution() {
    let trial = DecodeTrial {
        tokens: Array2::zeros((1, 4)),
        active: vec![true; 4],
        subject: 1,
    };
    let coin = Coin { p: vec![0.5, 0.3, 0.6] };
    for prior in [vec![0.5, 0.6], vec![1.0], vec![-0.5, 1.5]] {
        assert!(bayes_posterior(&coin, &trial, &[1, 2], &prior, 1).is_err());
    }
    assert!(bayes_posterior(&coin, &trial, &[1, 2], &[0.25, 0.75], 1).is_ok());
}

#[test]
fn coin_posterior_follows_the_evidence() {
    let tokens = Array2::from_shape_vec((1, 6), vec![0, 1, 1, 1, 0, 1]).unwrap();
    let trial = DecodeTrial {
        tokens,
        active: vec![true; 6],
        subject: 1,
    };
    let coin = Coin { p: vec![0.5, 0.2, 0.8] };
    let tr = bayes_posterior(&coin, &trial, &[1, 2], &[0.5, 0.5], 1).unwrap();
    // four ones and one zero favour the second coin by (0.8/0.2)^3
    let odds = 4f64.powi(3);
    assert!((tr.posterior[[4, 1]] - odds / (1.0 + odds)).abs() < 1e-12);
    assert_eq!(tr.decision(), 2);
    for r in tr.posterior.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-9);
    }
}

fn tiny_gpt(use_condition: bool, seed: u64) -> Model {
    let spec = GptSpec {
        n_channels: 1,
        vocab: 2,
        layers: 1,
        heads: 2,
        embed: 4,
        min_ctx: 1,
        max_ctx: 6,
        n_conditions: 2,
        n_subjects: 1,
        tie_weights: true,
        use_channel_embedding: true,
        use_condition_embedding: use_condition,
    };
    let mut m = Model::init(&ModelSpec::ChannelGpt(spec), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        m.params_mut().get_mut(id).mapv_inplace(|v| { let z: f64 = StandardNormal.sample(&mut rng); v + z * 0.8 });
    }
    m
}

#[test]
fn condition_blind_model_keeps_the_prior() {
    let m = tiny_gpt(false, 3);
    let trial = DecodeTrial {
        tokens: Array2::from_shape_vec((1, 6), vec![0, 1, 0, 0, 1, 1]).unwrap(),
        active: vec![true; 6],
        subject: 1,
    };
    let tr = bayes_posterior(&m, &trial, &[1, 2], &[0.3, 0.7], 1).unwrap();
    for r in tr.posterior.rows() {
        assert!((r[0] - 0.3).abs() < 1e-12 && (r[1] - 0.7).abs() < 1e-12);
    }
}

#[test]
fn posterior_matches_exhaustive_enumeration() {
    let m = tiny_gpt(true, 7);
    let prior = [0.4, 0.6];
    for len in 2..=6usize {
        let seqs: Vec<Vec<u32>> = (0..1usize << len)
            .map(|code| (0..len).map(|i| ((code >> i) & 1) as u32).collect())
            .collect();
        // full-length joint of every sequence under every label, given its first sample
        let joint: Vec<Vec<f64>> = (1..=2u32)
            .map(|y| {
                seqs.iter()
                    .map(|s| {
                        let tok = Array2::from_shape_vec((1, len), s.clone()).unwrap();
                        m.step_log_probs(&tok, &vec![y; len], &vec![1; len]).unwrap().iter().sum::<f64>().exp()
                    })
                    .collect()
            })
            .collect();
        for y in 0..2 {
            for first in 0..2u32 {
                let total: f64 = seqs.iter().zip(&joint[y]).filter(|(s, _)| s[0] == first).map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
        for obs in &seqs {
            let trial = DecodeTrial {
                tokens: Array2::from_shape_vec((1, len), obs.clone()).unwrap(),
                active: vec![true; len],
                subject: 1,
            };
            let tr = bayes_posterior(&m, &trial, &[1, 2], &prior, 1).unwrap();
            for t in 1..len {
                // prefix marginal by summing the joint over all completions
                let marg: Vec<f64> = (0..2)
                    .map(|y| {
                        seqs.iter()
                            .zip(&joint[y])
                            .filter(|(s, _)| s[..=t] == obs[..=t])
                            .map(|(_, p)| p)
                            .sum::<f64>()
                    })
                    .collect();
                let z = prior[0] * marg[0] + prior[1] * marg[1];
                for y in 0..2 {
                    let expect = prior[y] * marg[y] / z;
                    assert!((tr.posterior[[t - 1, y]] - expect).abs() < 1e-9, "len {len} t {t}");
                }
            }
        }
    }
}

#[test]
fn binomial_tail_matches_direct_sums() {
    assert!((binomial_tail(4, 5, 0.5) - 6.0 / 32.0).abs() < 1e-15);
    assert_eq!(binomial_tail(0, 10, 0.3), 1.0);
    assert_eq!(binomial_tail(11, 10, 0.3), 0.0);
    let direct: f64 = (30..=100)
        .map(|k| {
            let mut c = 1.0f64;
            for i in 0..k {
                c *= (100 - i) as f64 / (i + 1) as f64;
            }
            c * 0.25f64.powi(k as i32) * 0.75f64.powi(100 - k as i32)
        })
        .sum();
    assert!((binomial_tail(30, 100, 0.25) / direct - 1.0).abs() < 1e-10);
}

#[test]
fn decode_trials_recovers_coin_labels() {
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut condition = vec![0u32; n];
    let mut tokens = Array2::zeros((2, n));
    let mut t = 20;
    let mut k = 1;
    while t + 20 < n {
        for v in &mut condition[t..t + 10] {
            *v = k;
        }
        k = 3 - k;
        t += 40;
    }
    let coin = Coin { p: vec![0.5, 0.2, 0.8] };
    for i in 0..n {
        let p = coin.p[condition[i.saturating_sub(1)] as usize];
        for c in 0..2 {
            tokens[[c, i]] = u32::from(rand::Rng::gen::<f64>(&mut rng) < p);
        }
    }
    let tok = TokenizedRecording {
        tokens,
        codec: Codec::MuLaw(MuLawCodec::new(255.0, 2).unwrap()),
        fs: 100.0,
        channel_names: vec!["a".into(), "b".into()],
        condition,
        subject: vec![1; n],
    };
    let d = decode_trials(&coin, &tok, &[1, 2], 5, 15, None).unwrap();
    assert!(d.truths.len() > 40);
    assert!(d.accuracy > 0.9 && d.p_value < 1e-6, "{} {}", d.accuracy, d.p_value);
    assert!(decode_trials(&coin, &tok, &[1], 5, 15, None).is_err());
}

/// Trials whose class shows as a class-specific spatio-temporal pattern plus noise.
fn separable(n_per: usize, classes: &[u32], noise: f64, seed: u64) -> EpochedData {
    let (c, l) = (6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per * classes.len();
    let mut epochs = Array3::zeros((n, c, l));
    let mut conditions = Vec::with_capacity(n);
    for i in 0..n {
        let k = classes[i % classes.len()];
        conditions.push(k);
        for ch in 0..c {
            for t in 0..l {
                let pattern = ((k as f64 * 1.3 + ch as f64) * (t as f64 * 0.4 + k as f64)).sin();
                let z: f64 = StandardNormal.sample(&mut rng);
                epochs[[i, ch, t]] = pattern + noise * z;
            }
        }
    }
    EpochedData {
        epochs,
        onsets: (0..n).collect(),
        conditions,
        pre: 0,
        fs: 100.0,
        dropped: 0,
    }
}

#[test]
fn classifier_layers_chain() {
    let clf = LinearClassifier::new(100, 7, vec![1, 2, 3], None, 0).unwrap();
    assert_eq!(clf.layer_dims(), vec![(100, 80), (80, 80), (80, 80), (560, 3)]);
    let small = LinearClassifier::new(5, 3, vec![1, 2], None, 0).unwrap();
    assert_eq!(small.layer_dims(), vec![(5, 5), (5, 5), (5, 5), (15, 2)]);
}

#[test]
fn separable_classes_are_learned() {
    let data = separable(60, &[1, 2, 3, 4], 0.5, 2);
    let out = train_classifier(&data, &ClassifierConfig::default()).unwrap();
    assert!(out.val_accuracy > 0.95, "{}", out.val_accuracy);
    assert!(out.train_accuracy >= out.val_accuracy);
    let test = separable(30, &[1, 2, 3, 4], 0.5, 3);
    assert!(out.classifier.accuracy(&test).unwrap() > 0.95);
}

#[test]
fn shuffled_labels_give_chance() {
    use rand::seq::SliceRandom;
    let mut data = separable(100, &[1, 2, 3, 4], 0.5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    data.conditions.shuffle(&mut rng);
    let out = train_classifier(&data, &ClassifierConfig::default()).unwrap();
    let mut test = separable(100, &[1, 2, 3, 4], 0.5, 6);
    test.conditions.shuffle(&mut rng);
    let acc = out.classifier.accuracy(&test).unwrap();
    let sd = (0.25f64 * 0.75 / test.n_trials() as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sd, "{acc}");
}

#[test]
fn missing_class_is_an_error() {
    let data = separable(10, &[1, 2], 0.5, 0);
    let one = data.select(&[0, 1, 2]);
    assert!(matches!(train_classifier(&one.select(&[0, 2]), &ClassifierConfig::default()), Err(Error::InvalidArgument(_))));
    let clf = LinearClassifier::new(6, 12, vec![1, 2], None, 0).unwrap();
    let other = separable(2, &[1, 5], 0.5, 0);
    assert!(matches!(clf.accuracy(&other), Err(Error::UnknownLabel(_))));
}

#[test]
fn identical_pretraining_equals_direct_training() {
    let data = separable(20, &[1, 2], 1.0, 8);
    let test = separable(20, &[1, 2], 1.0, 9);
    let r = transfer_experiment(&data, &data, &test, &ClassifierConfig::default()).unwrap();
    assert_eq!(r.zero_shot, r.direct);
    let table = transfer_table(&[r]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("setting\tpretrain_trials\tzero_shot_pct\tfinal_pct\nreal_only\t0\t-\t"));
}

#[test]
fn transfer_requires_matching_conditions() {
    let a = separable(10, &[1, 2], 1.0, 0);
    let b = separable(10, &[1, 3], 1.0, 1);
    assert!(transfer_experiment(&a, &b, &b, &ClassifierConfig::default()).is_err());
}

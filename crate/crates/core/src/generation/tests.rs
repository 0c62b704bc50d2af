use ndarray::Array2;

use super::*;
use crate::models::{ArSpec, FlatGptSpec, GptSpec, ModelSpec, WavenetSpec};
use crate::signal::{preprocess, synthesize, welch_psd, SyntheticSpec};
use crate::tokenize::{MuLawCodec, RqConfig, VqCodec};
use crate::training::{trial_blocks, TrainingMeta};

fn mulaw(q: usize) -> Option<Codec> {
    Some(Codec::MuLaw(MuLawCodec::new(255.0, q).unwrap()))
}

fn wavenet_ckpt() -> Checkpoint {
    let spec = WavenetSpec {
        n_channels: 3,
        vocab: 16,
        hidden: 6,
        skip: 6,
        stacks: 1,
        layers_per_stack: 3,
        n_conditions: 2,
        condition_embed: 2,
        n_subjects: 1,
        subject_embed: 0,
        mix: true,
    };
    Checkpoint::new(Model::init(&ModelSpec::Wavenet(spec), 1).unwrap(), mulaw(16), TrainingMeta::default())
}

fn gpt_ckpt() -> Checkpoint {
    let spec = GptSpec {
        n_channels: 2,
        vocab: 16,
        layers: 1,
        heads: 2,
        embed: 8,
        min_ctx: 4,
        max_ctx: 10,
        n_conditions: 2,
        n_subjects: 2,
        tie_weights: true,
        use_channel_embedding: true,
        use_condition_embedding: true,
    };
    Checkpoint::new(Model::init(&ModelSpec::ChannelGpt(spec), 2).unwrap(), mulaw(16), TrainingMeta::default())
}

fn schedule(trial: f64) -> ConditionSource {
    ConditionSource::Schedule {
        n_conditions: 2,
        trial_duration_s: trial,
        iti_s: 0.3,
        iti_jitter_s: 0.1,
        lead_in_s: 0.2,
    }
}

#[test]
fn generation_is_deterministic_and_prefix_stable() {
    for ckpt in [wavenet_ckpt(), gpt_ckpt()] {
        let short = GenerationPlan::new(0.5, 100.0, schedule(0.2), 7);
        let long = GenerationPlan {
            duration_s: 1.2,
            ..short.clone()
        };
        let a = generate(&ckpt, &short).unwrap();
        let b = generate(&ckpt, &short).unwrap();
        assert_eq!(a, b);
        let c = generate(&ckpt, &long).unwrap();
        let (ta, tc) = (a.tokens.unwrap().tokens, c.tokens.unwrap().tokens);
        assert_eq!(ta, tc.slice(ndarray::s![.., ..50]));
        let other = generate(&ckpt, &GenerationPlan { seed: 8, ..short }).unwrap();
        assert_ne!(other.tokens.unwrap().tokens, ta);
    }
}

#[test]
fn output_is_in_vocabulary_and_range() {
    let g = generate(&gpt_ckpt(), &GenerationPlan::new(2.0, 100.0, schedule(0.5), 1)).unwrap();
    let tok = g.tokens.unwrap();
    assert_eq!(tok.tokens.dim(), (2, 200));
    assert!(tok.tokens.iter().all(|&q| q < 16));
    assert!(g.recording.data.iter().all(|v| v.abs() < 1.0));
    assert_eq!(g.recording.condition, tok.condition);
}

#[test]
fn schedule_uses_the_requested_trial_duration() {
    let plan = GenerationPlan::new(20.0, 100.0, schedule(0.2), 3);
    let track = plan.condition_track().unwrap();
    let blocks = trial_blocks(&track);
    assert!(blocks.len() > 10);
    // the final trial may be cut by the end of the plan
    assert!(blocks[..blocks.len() - 1].iter().all(|&(s, e, _)| e - s == 20));
    let conds: std::collections::BTreeSet<u32> = blocks.iter().map(|b| b.2).collect();
    assert_eq!(conds.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    let g = generate(&wavenet_ckpt(), &GenerationPlan { duration_s: 3.0, ..plan }).unwrap();
    let ep = crate::signal::epoch(&g.recording, 0.0, 0.2).unwrap();
    assert!(ep.n_trials() >= 2);
    assert_eq!(ep.epoch_len(), 20);
}

#[test]
fn replayed_track_must_cover_the_plan() {
    let plan = GenerationPlan::new(1.0, 100.0, ConditionSource::Track(vec![0; 50]), 0);
    assert!(generate(&gpt_ckpt(), &plan).is_err());
    let plan = GenerationPlan::new(0.5, 100.0, ConditionSource::Track(vec![1; 50]), 0);
    assert_eq!(generate(&gpt_ckpt(), &plan).unwrap().recording.condition, vec![1; 50]);
}

#[test]
fn unknown_subject_or_condition_is_rejected() {
    let plan = GenerationPlan {
        subject: 3,
        ..GenerationPlan::new(0.2, 100.0, ConditionSource::Silent, 0)
    };
    assert!(matches!(generate(&gpt_ckpt(), &plan), Err(Error::UnknownLabel(_))));
    let plan = GenerationPlan::new(0.2, 100.0, ConditionSource::Track(vec![5; 20]), 0);
    assert!(matches!(generate(&gpt_ckpt(), &plan), Err(Error::UnknownLabel(_))));
}

#[test]
fn data_prime_is_consumed() {
    let ckpt = gpt_ckpt();
    let prime = |v: u32| Prime::Data {
        tokens: Array2::from_elem((2, 6), v),
        condition: vec![0; 6],
        subject: vec![1; 6],
    };
    let base = GenerationPlan::new(0.3, 100.0, ConditionSource::Silent, 4);
    let a = generate(&ckpt, &GenerationPlan { prime: prime(1), ..base.clone() }).unwrap();
    let b = generate(&ckpt, &GenerationPlan { prime: prime(14), ..base }).unwrap();
    assert_eq!(a.recording.n_samples(), 30);
    assert_ne!(a.tokens.unwrap().tokens, b.tokens.unwrap().tokens);
}

#[test]
fn flat_model_generates_through_the_vector_codec() {
    let rec = preprocess(&synthesize(&SyntheticSpec::desk(4, 2, 20.0, 1)).unwrap(), 4.0).unwrap();
    let codec = VqCodec::fit(&rec, 2, &RqConfig::new(2, 2, 0)).unwrap();
    let spec = FlatGptSpec {
        n_buckets: 2,
        vocab: codec.vocab_size(),
        layers: 1,
        heads: 2,
        embed: 8,
        min_ctx: 3,
        max_ctx: 6,
        n_conditions: 2,
        n_subjects: 1,
        use_condition_embedding: true,
    };
    let ckpt = Checkpoint::new(
        Model::init(&ModelSpec::FlatGpt(spec), 0).unwrap(),
        Some(Codec::Vq(codec)),
        TrainingMeta::default(),
    );
    let plan = GenerationPlan::new(0.4, 100.0, schedule(0.1), 2);
    let g = generate(&ckpt, &plan).unwrap();
    assert_eq!(g.recording.data.dim(), (4, 40));
    assert_eq!(g.tokens.as_ref().unwrap().tokens.dim(), (2, 40));
    assert_eq!(generate(&ckpt, &plan).unwrap(), g);
    assert_eq!(
        generate(&ckpt, &GenerationPlan { duration_s: 0.8, ..plan }).unwrap().tokens.unwrap().tokens.slice(ndarray::s![.., ..40]),
        g.tokens.unwrap().tokens
    );
}

#[test]
fn greedy_limit_is_deterministic_across_seeds() {
    let ckpt = gpt_ckpt();
    let plan = |seed| GenerationPlan {
        top_p: 1e-9,
        ..GenerationPlan::new(0.3, 100.0, ConditionSource::Silent, seed)
    };
    assert_eq!(generate(&ckpt, &plan(1)).unwrap(), generate(&ckpt, &plan(2)).unwrap());
}

fn ar_model(coefs: &[f64], sigma: f64) -> ArModel {
    let mut m = ArModel::new(ArSpec::new(coefs.len(), 1)).unwrap();
    m.set_coefficients(Array2::from_shape_vec((1, coefs.len()), coefs.to_vec()).unwrap()).unwrap();
    m.set_noise_std(&[sigma]).unwrap();
    m
}

/// Frequency maximising the AR(2) spectrum 1 / |1 − a₁e^{−iω} − a₂e^{−2iω}|².
pub(crate) fn ar2_peak_hz(a1: f64, a2: f64, fs: f64) -> f64 {
    let c = a1 * (a2 - 1.0) / (4.0 * a2);
    c.clamp(-1.0, 1.0).acos() / (2.0 * std::f64::consts::PI) * fs
}

#[test]
fn white_noise_spectrum_is_flat() {
    let rec = generate_ar(&ar_model(&[0.0], 1.0), 400.0, 100.0, 5).unwrap();
    let psd = welch_psd(&rec, 128, 0.5).unwrap();
    let p = psd.power.row(0);
    let inner = &p.as_slice().unwrap()[1..p.len() - 1];
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    for &v in inner {
        assert!((10.0 * (v / mean).log10()).abs() < 3.0);
    }
}

#[test]
fn resonant_filter_peaks_at_the_analytic_frequency() {
    let (r, f0, fs) = (0.95, 10.0, 100.0);
    let theta = 2.0 * std::f64::consts::PI * f0 / fs;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let rec = generate_ar(&ar_model(&[a1, a2], 0.1), 300.0, fs, 1).unwrap();
    let psd = welch_psd(&rec, 256, 0.5).unwrap();
    let row = psd.power.row(0);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
    let expect = psd.bin_of(ar2_peak_hz(a1, a2, fs));
    assert!(peak.abs_diff(expect) <= 1, "{peak} vs {expect}");
}

#[test]
fn ar_generation_is_seeded_and_detects_instability() {
    let m = ar_model(&[0.5], 1.0);
    assert_eq!(generate_ar(&m, 2.0, 100.0, 3).unwrap(), generate_ar(&m, 2.0, 100.0, 3).unwrap());
    assert_ne!(generate_ar(&m, 2.0, 100.0, 3).unwrap(), generate_ar(&m, 2.0, 100.0, 4).unwrap());
    match generate_ar(&ar_model(&[1.5], 1.0), 10.0, 100.0, 0) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("diverged")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn plan_text_is_canonical() {
    let p = GenerationPlan::new(3600.0, 250.0, schedule(0.5), 9);
    let t = p.to_text();
    assert!(t.starts_with("kind = generation_plan\n"));
    assert!(t.contains("top_p = 0.8\n") && t.contains("conditions = schedule\n"));
    assert_eq!(t, p.clone().to_text());
}

#[test]
fn plan_validation() {
    let ok = GenerationPlan::new(1.0, 100.0, ConditionSource::Silent, 0);
    assert!(ok.validate().is_ok());
    assert!(GenerationPlan { top_p: 0.0, ..ok.clone() }.validate().is_err());
    assert!(GenerationPlan { top_p: 1.1, ..ok.clone() }.validate().is_err());
    assert!(GenerationPlan { duration_s: 0.0, ..ok.clone() }.validate().is_err());
    assert!(GenerationPlan { subject: 0, ..ok }.validate().is_err());
}

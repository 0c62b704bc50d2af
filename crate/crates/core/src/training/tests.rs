use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::models::{ArSpec, FlatGptSpec, GptSpec, WavenetSpec};
use crate::nn::ParamStore;
use crate::tokenize::{Codec, MuLawCodec};

fn tiny_gpt(q: usize) -> GptSpec {
    GptSpec {
        n_channels: 2,
        vocab: q,
        layers: 1,
        heads: 2,
        embed: 8,
        min_ctx: 4,
        max_ctx: 12,
        n_conditions: 2,
        n_subjects: 2,
        tie_weights: true,
        use_channel_embedding: true,
        use_condition_embedding: true,
    }
}

fn tiny_wavenet(mix: bool) -> WavenetSpec {
    WavenetSpec {
        n_channels: 2,
        vocab: 8,
        hidden: 4,
        skip: 4,
        stacks: 1,
        layers_per_stack: 2,
        n_conditions: 2,
        condition_embed: 2,
        n_subjects: 2,
        subject_embed: 2,
        mix,
    }
}

fn tokens(data: Array2<u32>, q: usize) -> TokenizedRecording {
    let t = data.ncols();
    TokenizedRecording {
        channel_names: (0..data.nrows()).map(|c| format!("c{c}")).collect(),
        tokens: data,
        codec: Codec::MuLaw(MuLawCodec::new(255.0, q).unwrap()),
        fs: 100.0,
        condition: (0..t).map(|i| if i % 20 < 5 { (i / 20 % 2 + 1) as u32 } else { 0 }).collect(),
        subject: vec![1; t],
    }
}

fn random_tokens(streams: usize, t: usize, q: usize, seed: u64) -> TokenizedRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tokens(Array2::from_shape_fn((streams, t), |_| rng.gen_range(0..q as u32)), q)
}

fn window(streams: usize, len: usize, q: usize, seed: u64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Window {
        tokens: Array2::from_shape_fn((streams, len), |_| rng.gen_range(0..q as u32)),
        condition: (0..len).map(|_| rng.gen_range(0..=2)).collect(),
        subject: (0..len).map(|_| rng.gen_range(1..=2)).collect(),
    }
}

fn small_cfg(spec: &ModelSpec) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 1e-2,
        max_epochs: 20,
        steps_per_epoch: Some(5),
        max_val_windows: Some(8),
        ..TrainConfig::for_spec(spec)
    }
}

#[test]
fn constant_sequence_is_learned() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    let data = tokens(Array2::from_elem((2, 400), 3), 8);
    let out = train(Model::init(&spec, 0).unwrap(), &data, &data, &small_cfg(&spec)).unwrap();
    assert!(out.history.len() <= 20);
    assert!(out.checkpoint.meta.best_val_loss < 0.05, "{:?}", out.history.last());
}

#[test]
fn uniform_logits_give_log_q() {
    let spec = tiny_gpt(8);
    let mut m = crate::models::ChannelGpt::new(spec, 1).unwrap();
    m.token_table_mut().fill(0.0);
    let w = window(2, 10, 8, 2);
    let mut g = Graph::new(&m.params);
    let l = m.loss(&mut g, &[w], 4).unwrap();
    assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-3);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    // validation data unrelated to training data: validation loss rises once training overfits
    let tr = random_tokens(2, 300, 8, 1);
    let va = random_tokens(2, 300, 8, 2);
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        max_epochs: 40,
        patience: 3,
        ..small_cfg(&spec)
    };
    let out = train(Model::init(&spec, 0).unwrap(), &tr, &va, &cfg).unwrap();
    let (best_epoch, best) = out
        .history
        .iter()
        .map(|e| (e.epoch, e.val_loss))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    assert_eq!(out.checkpoint.meta.epoch, best_epoch);
    assert_eq!(out.checkpoint.meta.best_val_loss, best);
    if out.stopped_early {
        assert_eq!(out.history.len(), best_epoch + cfg.patience);
    }
    // the returned parameters reproduce the best validation loss up to f32 rounding
    let starts = evaluation_starts(300, cfg.min_ctx, cfg.max_ctx, cfg.max_val_windows).unwrap();
    let windows: Vec<Window> = starts.iter().map(|&s| batches::window_at(&va, s, cfg.max_ctx + 1)).collect();
    let again = token_eval_loss(out.checkpoint.model.as_token_model().unwrap(), &windows, &cfg).unwrap();
    assert!((again - best).abs() < 1e-4);
    assert!(out.history.last().unwrap().val_loss >= best);
}

#[test]
fn training_is_reproducible() {
    let spec = ModelSpec::Wavenet(tiny_wavenet(false));
    let data = random_tokens(2, 200, 8, 4);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..small_cfg(&spec)
    };
    let a = train(Model::init(&spec, 5).unwrap(), &data, &data, &cfg).unwrap();
    let b = train(Model::init(&spec, 5).unwrap(), &data, &data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn continuation_from_saved_checkpoint_matches() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    let data = random_tokens(2, 200, 8, 6);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..small_cfg(&spec)
    };
    let first = train(Model::init(&spec, 0).unwrap(), &data, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    first.checkpoint.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    let cont = TrainConfig { seed: 11, ..cfg.clone() };
    let a = train(first.checkpoint.model.clone(), &data, &data, &cont).unwrap();
    let b = train(loaded.model, &data, &data, &cont).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.train_loss - y.train_loss).abs() < 1e-6);
        assert!((x.val_loss - y.val_loss).abs() < 1e-6);
    }
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let spec = ArSpec::new(2, 1);
    let data = ar2_series(0.5, 0.0, 500, 0);
    let rec = Recording::from_f64(&data, 100.0, vec!["a".into()], vec![0; 500], vec![1; 500]).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..small_cfg(&ModelSpec::Ar(spec.clone()))
    };
    match train_ar(ArModel::new(spec).unwrap(), &rec, &rec, &cfg) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

fn ar2_series(a1: f64, a2: f64, t: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; t + 200];
    for i in 2..x.len() {
        let e: f64 = rng.sample(StandardNormal);
        x[i] = a1 * x[i - 1] + a2 * x[i - 2] + 0.1 * e;
    }
    Array2::from_shape_vec((1, t), x[200..].to_vec()).unwrap()
}

#[test]
fn ar_fit_recovers_known_process() {
    let (a1, a2) = (1.2, -0.6);
    let tr = ar2_series(a1, a2, 10_000, 1);
    let va = ar2_series(a1, a2, 2_000, 2);
    let rec = |x: &Array2<f64>| Recording::from_f64(x, 100.0, vec!["a".into()], vec![0; x.ncols()], vec![1; x.ncols()]).unwrap();
    let spec = ArSpec::new(2, 1);
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-2,
        max_epochs: 60,
        min_ctx: 2,
        max_ctx: 64,
        steps_per_epoch: Some(50),
        ..TrainConfig::for_spec(&ModelSpec::Ar(spec.clone()))
    };
    let out = train_ar(ArModel::new(spec).unwrap(), &rec(&tr), &rec(&va), &cfg).unwrap();
    let Model::Ar(m) = &out.checkpoint.model else { unreachable!() };
    let c = m.coefficients();
    assert!((c[[0, 0]] - a1).abs() < 0.05 && (c[[0, 1]] - a2).abs() < 0.05, "{c}");
    // noise variance 0.01
    assert!(out.checkpoint.meta.best_val_loss < 0.011, "{}", out.checkpoint.meta.best_val_loss);
    assert!((m.noise_std()[0] - 0.1).abs() < 0.01);
}

#[test]
fn masked_targets_have_zero_gradient() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let id = store.add_normal("logits", (6, 4), 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let x = g.param(id);
    let w = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    let l = g.softmax_ce(x, vec![0, 1, 2, 3, 0, 1], w.clone(), 3.0);
    let grads = g.backward(l);
    let gr = grads.get(id).unwrap();
    for (r, &wr) in w.iter().enumerate() {
        assert_eq!(gr.row(r).iter().all(|&v| v == 0.0), wr == 0.0);
    }
}

#[test]
fn early_targets_do_not_affect_the_loss() {
    // targets before min_ctx are only inputs; replacing their values at masked
    // target positions of the final sample changes nothing but that input.
    let m = crate::models::ChannelGpt::new(tiny_gpt(8), 3).unwrap();
    let w = window(2, 10, 8, 5);
    let loss = |w: &Window, min_ctx| {
        let mut g = Graph::new(&m.params);
        let l = m.loss(&mut g, std::slice::from_ref(w), min_ctx).unwrap();
        g.scalar(l)
    };
    // with min_ctx = 9 only the last target counts; it sees every earlier input
    let last_only = loss(&w, 9);
    let logits = {
        let mut g = Graph::new(&m.params);
        let v = m.forward(&mut g, &[Window {
            tokens: w.tokens.slice(ndarray::s![.., ..9]).to_owned(),
            condition: w.condition[..9].to_vec(),
            subject: w.subject[..9].to_vec(),
        }])
        .unwrap();
        g.value(v).clone()
    };
    let mut direct = 0.0;
    for c in 0..2 {
        let mut row = logits.row(c * 9 + 8).to_owned().insert_axis(ndarray::Axis(0));
        crate::nn::softmax_rows(&mut row);
        direct -= row[[0, w.tokens[[c, 9]] as usize]].ln();
    }
    assert!((last_only - direct / 2.0).abs() < 1e-12);
}

/// Moves every parameter off its initial value. Zero-initialised biases feeding a
/// ReLU otherwise sit exactly on the kink, where finite differences disagree
/// with any one-sided derivative.
fn jittered(spec: ModelSpec, seed: u64) -> Model {
    let mut m = Model::init(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let p = m.params_mut();
    for id in p.ids().collect::<Vec<_>>() {
        p.get_mut(id).mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    m
}

#[test]
fn gradients_match_finite_differences() {
    let eps = 1e-5;
    let gpt = jittered(ModelSpec::ChannelGpt(tiny_gpt(8)), 1);
    let mut untied = tiny_gpt(8);
    untied.tie_weights = false;
    let untied = jittered(ModelSpec::ChannelGpt(untied), 2);
    let wn = jittered(ModelSpec::Wavenet(tiny_wavenet(false)), 3);
    let wnm = jittered(ModelSpec::Wavenet(tiny_wavenet(true)), 4);
    let w = window(2, 9, 8, 7);
    for (name, m, ctx) in [("gpt", &gpt, 2), ("untied", &untied, 2), ("wavenet", &wn, 4), ("wavenet mix", &wnm, 4)] {
        let d = gradient_check(m, &[w.clone(), window(2, 9, 8, 8)], ctx, eps).unwrap();
        assert!(d < 1e-4, "{name}: {d}");
    }
    let flat = FlatGptSpec {
        n_buckets: 2,
        vocab: 4,
        layers: 1,
        heads: 2,
        embed: 8,
        min_ctx: 1,
        max_ctx: 4,
        n_conditions: 2,
        n_subjects: 2,
        use_condition_embedding: true,
    };
    let flat = jittered(ModelSpec::FlatGpt(flat), 5);
    let d = gradient_check(&flat, &[window(2, 5, 4, 9)], 1, eps).unwrap();
    assert!(d < 1e-4, "flat: {d}");
    let ar = jittered(ModelSpec::Ar(ArSpec::new(3, 2)), 0);
    let d = gradient_check(&ar, &[w.clone()], 0, eps).unwrap();
    assert!(d < 1e-4, "ar: {d}");
}

#[test]
fn degenerate_zero_window_has_finite_gradients() {
    let m = Model::init(&ModelSpec::Wavenet(tiny_wavenet(true)), 0).unwrap();
    let w = Window {
        tokens: Array2::zeros((2, 8)),
        condition: vec![0; 8],
        subject: vec![1; 8],
    };
    let d = gradient_check(&m, &[w], 0, 1e-5).unwrap();
    assert!(d.is_finite() && d < 1e-4);
}

#[test]
fn gradient_check_refuses_large_models() {
    let m = Model::init(&ModelSpec::Ar(ArSpec::new(255, 50)), 0).unwrap();
    assert!(gradient_check(&m, &[window(50, 300, 8, 0)], 0, 1e-5).is_err());
}

#[test]
fn channel_ablation_leaves_the_channel_table_untouched() {
    let abl = Ablations {
        disable_channel_embedding: true,
        ..Default::default()
    };
    let spec = abl.apply_to_spec(&ModelSpec::ChannelGpt(tiny_gpt(8)));
    let data = random_tokens(2, 200, 8, 3);
    let cfg = TrainConfig {
        max_epochs: 2,
        ablations: abl,
        ..small_cfg(&spec)
    };
    let mut init = Model::init(&spec, 0).unwrap();
    init.params_mut().round_to_f32();
    let out = train(init.clone(), &data, &data, &cfg).unwrap();
    let (a, b) = (init.params(), out.checkpoint.model.params());
    for id in a.ids() {
        let changed = a.get(id) != b.get(id);
        assert_eq!(changed, a.name(id) != "gpt.channel_embed", "{}", a.name(id));
    }
}

#[test]
fn ablation_must_be_built_into_the_spec() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    let cfg = TrainConfig {
        ablations: Ablations {
            disable_condition_embedding: true,
            ..Default::default()
        },
        ..small_cfg(&spec)
    };
    assert!(cfg.validate(&spec).is_err());
    assert!(cfg.validate(&cfg.ablations.apply_to_spec(&spec)).is_ok());
}

#[test]
fn config_validation() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    let ok = small_cfg(&spec);
    assert!(ok.validate(&spec).is_ok());
    assert!(TrainConfig { patience: 0, ..ok.clone() }.validate(&spec).is_err());
    assert!(TrainConfig { max_ctx: 13, ..ok.clone() }.validate(&spec).is_err());
    assert!(TrainConfig { loss: LossKind::MeanSquaredError, ..ok.clone() }.validate(&spec).is_err());
    assert_eq!(TrainConfig::for_spec(&spec).patience, 5);
    assert_eq!(TrainConfig::for_spec(&spec).learning_rate, 1e-3);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let spec = ModelSpec::ChannelGpt(tiny_gpt(8));
    let data = random_tokens(2, 200, 16, 0);
    assert!(train(Model::init(&spec, 0).unwrap(), &data, &data, &small_cfg(&spec)).is_err());
}


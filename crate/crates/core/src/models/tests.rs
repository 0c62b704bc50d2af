use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Graph;

fn random_window(streams: usize, len: usize, vocab: usize, conditions: u32, seed: u64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Window {
        tokens: Array2::from_shape_fn((streams, len), |_| rng.gen_range(0..vocab as u32)),
        condition: (0..len).map(|_| rng.gen_range(0..=conditions)).collect(),
        subject: vec![1; len],
    }
}

fn tiny_wavenet(mix: bool) -> WavenetSpec {
    WavenetSpec {
        n_channels: 3,
        vocab: 8,
        hidden: 6,
        skip: 5,
        stacks: 1,
        layers_per_stack: 3,
        n_conditions: 2,
        condition_embed: 3,
        n_subjects: 2,
        subject_embed: 2,
        mix,
    }
}

fn tiny_gpt() -> GptSpec {
    GptSpec {
        n_channels: 3,
        vocab: 8,
        layers: 2,
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

fn tiny_flat() -> FlatGptSpec {
    FlatGptSpec {
        n_buckets: 3,
        vocab: 5,
        layers: 2,
        heads: 2,
        embed: 8,
        min_ctx: 2,
        max_ctx: 5,
        n_conditions: 2,
        n_subjects: 1,
        use_condition_embedding: true,
    }
}

fn wn_logits(m: &Wavenet, w: &Window) -> Array2<f64> {
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, std::slice::from_ref(w)).unwrap();
    g.value(v).clone()
}

fn gpt_logits(m: &ChannelGpt, w: &Window) -> Array2<f64> {
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, std::slice::from_ref(w)).unwrap();
    g.value(v).clone()
}

fn flat_hidden(m: &FlatGpt, w: &Window) -> Array2<f64> {
    let mut g = Graph::new(&m.params);
    let (v, _) = m.hidden(&mut g, std::slice::from_ref(w)).unwrap();
    g.value(v).clone()
}

/// Rows (channel, time) of `a` and `b` agree exactly for time < t.
fn prefix_identical(a: &Array2<f64>, b: &Array2<f64>, streams: usize, len: usize, t: usize) -> bool {
    (0..streams).all(|c| (0..t).all(|i| a.row(c * len + i) == b.row(c * len + i)))
}

fn perturb(w: &Window, t: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Window {
    let mut p = w.clone();
    for c in 0..p.n_streams() {
        for i in t..p.len() {
            p.tokens[[c, i]] = rng.gen_range(0..vocab as u32);
        }
    }
    for i in t..p.len() {
        p.condition[i] = rng.gen_range(0..=2);
        p.subject[i] = rng.gen_range(1..=2);
    }
    p
}

#[test]
fn wavenet_is_causal() {
    for mix in [false, true] {
        let m = Wavenet::new(tiny_wavenet(mix), 1).unwrap();
        let w = random_window(3, 20, 8, 2, 2);
        let base = wn_logits(&m, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = rng.gen_range(1..20);
            let p = perturb(&w, t, 8, &mut rng);
            assert!(prefix_identical(&base, &wn_logits(&m, &p), 3, 20, t));
        }
    }
}

#[test]
fn channel_gpt_is_causal() {
    let m = ChannelGpt::new(tiny_gpt(), 1).unwrap();
    let w = random_window(3, 12, 8, 2, 4);
    let base = gpt_logits(&m, &w);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let t = rng.gen_range(1..12);
        let p = perturb(&w, t, 8, &mut rng);
        assert!(prefix_identical(&base, &gpt_logits(&m, &p), 3, 12, t));
    }
}

#[test]
fn flat_gpt_is_causal() {
    let spec = tiny_flat();
    let m = FlatGpt::new(spec.clone(), 1).unwrap();
    let mut w = random_window(3, 5, 5, 2, 6);
    w.subject = vec![1; 5];
    let base = flat_hidden(&m, &w);
    let n = base.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        // change one flat position and everything after it
        let p = rng.gen_range(1..n);
        let mut pw = w.clone();
        for q in p..=n {
            let (k, step) = (q % 4, q / 4);
            if k > 0 {
                pw.tokens[[k - 1, step]] = rng.gen_range(0..5);
            }
        }
        let other = flat_hidden(&m, &pw);
        for r in 0..p {
            assert_eq!(base.row(r), other.row(r), "row {r} changed after perturbing {p}");
        }
    }
}

#[test]
fn wavenet_receptive_field_matches_perturbation_horizon() {
    let spec = WavenetSpec::new(1, 256, 0);
    assert_eq!(spec.receptive_field(), 255);
    let m = Wavenet::new(spec, 0).unwrap();
    let len = 300;
    let w = random_window(1, len, 256, 0, 1);
    let base = wn_logits(&m, &w);
    let t0 = 10;
    let mut p = w.clone();
    p.tokens[[0, t0]] = (p.tokens[[0, t0]] + 1) % 256;
    let other = wn_logits(&m, &p);
    let changed: Vec<usize> = (0..len).filter(|&t| base.row(t) != other.row(t)).collect();
    assert_eq!(changed.first(), Some(&t0));
    assert_eq!(changed.last(), Some(&(t0 + 254)));
    assert_eq!(changed.len(), 255);
}

#[test]
fn zero_condition_track_ignores_condition_table() {
    let mut m = Wavenet::new(tiny_wavenet(false), 2).unwrap();
    let mut w = random_window(3, 10, 8, 2, 3);
    w.condition = vec![0; 10];
    let a = wn_logits(&m, &w);
    let id = m.params.id("wn.cond_embed").unwrap();
    m.params.get_mut(id).mapv_inplace(|v| v * 5.0 + 1.0);
    assert_eq!(a, wn_logits(&m, &w));
}

#[test]
fn identity_mix_reproduces_plain_wavenet() {
    let mixed = Wavenet::new(tiny_wavenet(true), 9).unwrap();
    let mut plain = Wavenet::new(tiny_wavenet(false), 4).unwrap();
    for id in plain.params.ids().collect::<Vec<_>>() {
        let name = plain.params.name(id).to_string();
        *plain.params.get_mut(id) = mixed.params.get(mixed.params.id(&name).unwrap()).clone();
    }
    assert_eq!(mixed.mix_matrix().unwrap(), &Array2::<f64>::eye(3));
    let w = random_window(3, 10, 8, 2, 1);
    assert_eq!(wn_logits(&mixed, &w), wn_logits(&plain, &w));
}

#[test]
fn wavenet_step_matches_forward() {
    for mix in [false, true] {
        let mut m = Wavenet::new(tiny_wavenet(mix), 5).unwrap();
        if let Some(wm) = m.mix_matrix_mut() {
            wm[[0, 2]] = 0.4;
            wm[[1, 0]] = -0.3;
        }
        let mut w = random_window(3, 16, 8, 2, 8);
        w.subject = (0..16).map(|i| 1 + (i / 8) as u32).collect();
        let full = wn_logits(&m, &w);
        let mut st = m.state();
        for t in 0..16 {
            let toks: Vec<u32> = w.tokens.column(t).to_vec();
            let l = m.step(&mut st, &toks, w.condition[t], w.subject[t]).unwrap();
            for c in 0..3 {
                let d = (&l.row(c) - &full.row(c * 16 + t)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
                assert!(d < 1e-10, "mix {mix} t {t} c {c}: {d}");
            }
        }
    }
}

#[test]
fn channel_gpt_step_matches_forward_and_reprimes() {
    let spec = tiny_gpt();
    let m = ChannelGpt::new(spec.clone(), 3).unwrap();
    let w = random_window(3, 12, 8, 2, 10);
    let full = gpt_logits(&m, &w);
    let mut st = m.state();
    for t in 0..12 {
        let toks: Vec<u32> = w.tokens.column(t).to_vec();
        let l = m.step(&mut st, &toks, w.condition[t], w.subject[t]).unwrap();
        for c in 0..3 {
            let d = (&l.row(c) - &full.row(c * 12 + t)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(d < 1e-10, "t {t}: {d}");
        }
    }
    // the cache is full: the next step restarts from the last min_ctx - 1 inputs
    let next = random_window(3, 1, 8, 2, 11);
    let toks: Vec<u32> = next.tokens.column(0).to_vec();
    let l = m.step(&mut st, &toks, next.condition[0], 1).unwrap();
    assert_eq!(st.cached_len(), spec.min_ctx);
    let keep = spec.min_ctx - 1;
    let mut tail = Window {
        tokens: ndarray::concatenate(ndarray::Axis(1), &[w.tokens.slice(s![.., 12 - keep..]), next.tokens.view()]).unwrap(),
        condition: w.condition[12 - keep..].to_vec(),
        subject: w.subject[12 - keep..].to_vec(),
    };
    tail.condition.push(next.condition[0]);
    tail.subject.push(1);
    let reference = gpt_logits(&m, &tail);
    for c in 0..3 {
        let d = (&l.row(c) - &reference.row(c * spec.min_ctx + keep)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(d < 1e-10);
    }
}

#[test]
fn flat_gpt_step_matches_forward() {
    let spec = tiny_flat();
    let m = FlatGpt::new(spec.clone(), 2).unwrap();
    let mut w = random_window(3, 6, 5, 2, 12);
    w.subject = vec![1; 6];
    let full = flat_hidden(&m, &w);
    let mut st = m.state();
    let mut p = 0;
    let close = |a: &ndarray::Array1<f64>, r: usize| (a - &full.row(r)).mapv(f64::abs).fold(0.0, |x: f64, &y| x.max(y)) < 1e-10;
    for t in 0..6 {
        let h = m.begin_step(&mut st, w.condition[t], 1).unwrap();
        assert!(close(&h, p));
        p += 1;
        for b in 0..3 {
            let out = m.push_code(&mut st, w.tokens[[b, t]]).unwrap();
            if b < 2 {
                assert!(close(&out.unwrap(), p));
            } else {
                assert!(out.is_none());
            }
            p += 1;
        }
    }
    // capacity reached: another step re-primes from the latest min_ctx steps
    let h = m.begin_step(&mut st, 1, 1).unwrap();
    let keep = spec.min_ctx;
    let tail = Window {
        tokens: ndarray::concatenate(ndarray::Axis(1), &[w.tokens.slice(s![.., 6 - keep..]), Array2::zeros((3, 1)).view()]).unwrap(),
        condition: w.condition[6 - keep..].iter().copied().chain([1]).collect(),
        subject: vec![1; keep + 1],
    };
    let reference = flat_hidden(&m, &tail);
    assert!((&h - &reference.row(keep * 4)).mapv(f64::abs).fold(0.0, |x: f64, &y| x.max(y)) < 1e-10);
}

#[test]
fn tied_output_shares_the_token_table() {
    let mut m = ChannelGpt::new(tiny_gpt(), 4).unwrap();
    assert!(m.params.id("gpt.output").is_none());
    let w = random_window(3, 6, 8, 2, 1);
    let before = gpt_logits(&m, &w);
    m.token_table_mut().row_mut(5).fill(0.0);
    let after = gpt_logits(&m, &w);
    // column 5 of every row is now h · 0 = 0
    assert!(after.column(5).iter().all(|&v| v == 0.0));
    assert_ne!(before.column(5), after.column(5));

    let mut spec = tiny_gpt();
    spec.tie_weights = false;
    let untied = ChannelGpt::new(spec, 4).unwrap();
    assert!(untied.params.id("gpt.output").is_some());
}

#[test]
fn channel_embedding_distinguishes_channels() {
    let m = ChannelGpt::new(tiny_gpt(), 6).unwrap();
    let mut w = random_window(3, 6, 8, 2, 2);
    let row0 = w.tokens.row(0).to_owned();
    w.tokens.row_mut(1).assign(&row0);
    let l = gpt_logits(&m, &w);
    assert_ne!(l.slice(s![0..6, ..]), l.slice(s![6..12, ..]));

    let mut spec = tiny_gpt();
    spec.use_channel_embedding = false;
    let m = ChannelGpt::new(spec, 6).unwrap();
    let l = gpt_logits(&m, &w);
    assert_eq!(l.slice(s![0..6, ..]), l.slice(s![6..12, ..]));
}

#[test]
fn sequence_longer_than_positions_is_an_error() {
    let m = ChannelGpt::new(tiny_gpt(), 0).unwrap();
    let w = random_window(3, 13, 8, 2, 0);
    let mut g = Graph::new(&m.params);
    assert!(m.forward(&mut g, &[w]).is_err());
}

#[test]
fn unknown_labels_are_rejected() {
    let m = Wavenet::new(tiny_wavenet(false), 0).unwrap();
    let mut w = random_window(3, 5, 8, 2, 0);
    w.condition[2] = 3;
    let mut g = Graph::new(&m.params);
    assert!(matches!(m.forward(&mut g, &[w.clone()]), Err(Error::UnknownLabel(_))));
    w.condition[2] = 1;
    w.subject[0] = 3;
    let mut g = Graph::new(&m.params);
    assert!(matches!(m.forward(&mut g, &[w]), Err(Error::UnknownLabel(_))));
}

#[test]
fn softmax_outputs_are_distributions() {
    let m = ChannelGpt::new(tiny_gpt(), 1).unwrap();
    let mut l = gpt_logits(&m, &random_window(3, 8, 8, 2, 3));
    crate::nn::softmax_rows(&mut l);
    for r in l.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-6 && r.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn flat_restricted_softmax_covers_one_bucket() {
    let m = FlatGpt::new(tiny_flat(), 1).unwrap();
    let mut st = m.state();
    let h = m.begin_step(&mut st, 0, 1).unwrap();
    for b in 0..3 {
        let d = m.bucket_distribution(&h, b).unwrap();
        assert_eq!(d.len(), 5);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn flat_targets_follow_the_separator_layout() {
    // B = 2, steps 0..3; flat: sep a0 b0 sep a1 b1 sep a2 b2
    let tokens = ndarray::array![[10u32, 11, 12], [20, 21, 22]];
    let n = 3 * 3 - 1;
    let t = flat_gpt::flat_targets(2, &tokens, n, 0);
    // separator inputs (positions 0, 3, 6) predict bucket 0 of their own step
    assert!(t.contains(&(0, 0, 10)));
    assert!(t.contains(&(3, 0, 11)));
    assert!(t.contains(&(6, 0, 12)));
    // last bucket of a step would predict a separator: never scored
    assert!(!t.iter().any(|&(p, _, _)| p == 2 || p == 5));
    assert_eq!(t.len(), 6);
    // with min_ctx = 2 only step 2 is scored
    let t = flat_gpt::flat_targets(2, &tokens, n, 2);
    assert_eq!(t, vec![(6, 0, 12), (7, 1, 22)]);
}

#[test]
fn flat_receptive_field_scales_with_buckets() {
    let spec = FlatGptSpec::new(30, 16384, 0);
    assert_eq!(spec.flat_len(100), 3100);
    assert_eq!(spec.flat_len(spec.max_ctx), spec.max_ctx * 31);
}

#[test]
fn spec_text_round_trip() {
    let specs = [
        ModelSpec::Ar(ArSpec::new(7, 3)),
        ModelSpec::Wavenet(tiny_wavenet(true)),
        ModelSpec::ChannelGpt(tiny_gpt()),
        ModelSpec::FlatGpt(tiny_flat()),
    ];
    for s in specs {
        assert_eq!(ModelSpec::from_text(&s.to_text()).unwrap(), s);
    }
}

#[test]
fn parameter_counts() {
    // regression values; each also follows from the layer shapes below
    let wn = Model::init(&ModelSpec::Wavenet(tiny_wavenet(false)), 0).unwrap();
    let (c, q, r, sk, ec, l) = (3, 8, 6, 5, 5, 3);
    let per_layer = 2 * (2 * r * r + r) + ec * r + r * sk + sk;
    let expect = c * q * r + 2 * 3 + 2 * 2 + l * per_layer + (l - 1) * (r * r + r) + sk * sk + sk + sk * q + q;
    assert_eq!(wn.n_params(), expect);
    assert_eq!(wn.n_params(), 979);

    let wnm = Model::init(&ModelSpec::Wavenet(tiny_wavenet(true)), 0).unwrap();
    assert_eq!(wnm.n_params(), 979 + 9);

    let gpt = Model::init(&ModelSpec::ChannelGpt(tiny_gpt()), 0).unwrap();
    let e = 8;
    let expect = 8 * e + 12 * e + 2 * e + 2 * e + 3 * e + 2 * (12 * e * e + 13 * e);
    assert_eq!(gpt.n_params(), expect);
    assert_eq!(gpt.n_params(), 1960);

    let flat = Model::init(&ModelSpec::FlatGpt(tiny_flat()), 0).unwrap();
    let expect = (15 + 1) * e + 23 * e + 6 * e + 4 * e + 2 * e + e + 2 * (12 * e * e + 13 * e) + 3 * (e * 5 + 5);
    assert_eq!(flat.n_params(), expect);

    // full-size defaults
    let big = Model::init(&ModelSpec::ChannelGpt(GptSpec::new(306, 256, 118)), 0).unwrap();
    let e = 96;
    assert_eq!(big.n_params(), (256 + 256 + 118 + 1 + 306) * e + 12 * (12 * e * e + 13 * e));
    assert_eq!(big.n_params(), 1_432_032);
    let ar = Model::init(&ModelSpec::Ar(ArSpec::new(255, 306)), 0).unwrap();
    assert_eq!(ar.n_params(), 306 * 255 + 306 + 306);
}

#[test]
fn defaults() {
    let g = GptSpec::new(1, 256, 1);
    assert_eq!((g.layers, g.heads, g.embed, g.min_ctx, g.max_ctx), (12, 12, 96, 128, 256));
    let w = WavenetSpec::new(1, 256, 1);
    assert_eq!((w.stacks, w.layers_per_stack, w.hidden, w.skip, w.condition_embed), (2, 7, 256, 1024, 20));
}

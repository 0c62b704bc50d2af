//! The six pipeline commands. Each reads the artifacts of earlier commands
//! from `<out>/<stage>/` and writes its own stage directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use megcast::decoding::{decode_trials, transfer_experiment, transfer_table, ClassifierConfig};
use megcast::evaluation::{
    covariance_compare, evoked_analysis, fit_hmm, forecast_metrics, forecast_metrics_ar, psd_compare, summary_stats,
    tde_embed, EvalReport, HmmConfig,
};
use megcast::generation::{generate, ConditionSource, GenerationPlan};
use megcast::models::{ArSpec, FlatGptSpec, GptSpec, Model, ModelSpec, WavenetSpec};
use megcast::signal::io::{read_recording, write_recording};
use megcast::signal::{epoch, split_dataset, synthesize, EpochedData, Preprocessor, Recording, SyntheticSpec};
use megcast::tokenize::{
    quantize, quantize_vq, read_tokenized, write_tokenized, Codec, MuLawCodec, RqConfig, TokenizedRecording, VqCodec,
};
use megcast::training::{train, train_ar, Ablations, Checkpoint, TrainConfig};

use crate::config::{CodecKind, ConditionMode, DataSource, Family, RunConfig};
use crate::error::CliError;

/// Layout revision of stage directories; inputs from another revision are refused.
pub const ARTIFACT_FORMAT: u32 = 1;
pub const VERSION_FILE: &str = "version.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Tokenize,
    Train,
    Generate,
    Eval,
    Decode,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Tokenize => "tokenize",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
            Stage::Decode => "decode",
        }
    }

    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        Path::new(&cfg.out).join(self.name())
    }
}

fn version_text() -> String {
    format!(
        "tool = megcast\nversion = {}\nartifact_format = {ARTIFACT_FORMAT}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(megcast::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates an empty stage directory holding the resolved config and tool version.
fn open_stage(stage: Stage, cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let dir = stage.dir(cfg);
    if dir.exists() {
        let occupied = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.next().is_some();
        if occupied {
            if !force {
                return Err(CliError::Exists(dir));
            }
            if !dir.join(VERSION_FILE).exists() {
                return Err(CliError::Other(format!(
                    "{} was not written by this tool; refusing to clear it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write(&dir.join(VERSION_FILE), &version_text())?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    Ok(dir)
}

/// Checks that an earlier stage ran and used this artifact layout.
fn input_stage(stage: Stage, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = stage.dir(cfg);
    let vf = dir.join(VERSION_FILE);
    let text = fs::read_to_string(&vf).map_err(|_| CliError::MissingInput {
        path: dir.clone(),
        hint: format!("run `megcast {}` first", stage.name()),
    })?;
    let found = text
        .lines()
        .find_map(|l| l.strip_prefix("artifact_format = "))
        .unwrap_or("unknown")
        .trim()
        .to_string();
    if found != ARTIFACT_FORMAT.to_string() {
        return Err(CliError::Version(format!(
            "{} has artifact format {found}, this tool reads {ARTIFACT_FORMAT}",
            dir.display()
        )));
    }
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_rec(dir: &Path) -> Result<Recording, CliError> {
    if !dir.join("header.txt").exists() {
        return Err(CliError::MissingInput {
            path: dir.to_path_buf(),
            hint: "no recording header".into(),
        });
    }
    Ok(read_recording(dir)?)
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let d = &cfg.data;
    let rec = match d.source {
        DataSource::Synthetic => {
            let mut spec = SyntheticSpec::desk(d.n_channels, d.n_conditions, d.duration_s, cfg.seed);
            spec.fs = d.fs;
            spec.noise_amplitude = d.noise_amplitude;
            spec.n_subjects = d.n_subjects;
            synthesize(&spec)?
        }
        DataSource::File => read_rec(Path::new(&d.path))?,
    };
    let dir = open_stage(Stage::Synth, cfg, force)?;
    write_recording(&rec, &dir.join("recording"))?;
    Ok(dir)
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn cmd_tokenize(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let src = input_stage(Stage::Synth, cfg)?;
    let rec = read_rec(&src.join("recording"))?;
    let split = split_dataset(&rec, cfg.data.val_trials, cfg.data.test_trials)?;
    let pre = Preprocessor::fit(&split.train.recording, cfg.data.clip)?;
    let parts = [
        pre.apply(&split.train.recording)?,
        pre.apply(&split.val.recording)?,
        pre.apply(&split.test.recording)?,
    ];
    let c = &cfg.codec;
    let codec = match c.kind {
        CodecKind::Mulaw => Codec::MuLaw(MuLawCodec::new(c.mu, c.n_bins)?),
        CodecKind::Vq => Codec::Vq(VqCodec::fit(
            &parts[0],
            c.n_buckets,
            &RqConfig::new(c.stages, c.bits, cfg.seed.wrapping_add(1)),
        )?),
    };
    let dir = open_stage(Stage::Tokenize, cfg, force)?;
    let mut stats = String::from("channel\tmean\tstd\tscale\n");
    for (ch, name) in rec.channel_names.iter().enumerate() {
        let _ = writeln!(stats, "{name}\t{}\t{}\t{}", pre.mean[ch], pre.std[ch], pre.scale[ch]);
    }
    write(&dir.join("preprocess.tsv"), &stats)?;
    for (name, r) in SPLITS.iter().zip(&parts) {
        write_recording(r, &dir.join(format!("{name}_signal")))?;
        let tok = match &codec {
            Codec::MuLaw(m) => quantize(r, m)?,
            Codec::Vq(v) => quantize_vq(r, v)?,
        };
        write_tokenized(&tok, &dir.join(name))?;
    }
    Ok(dir)
}

/// Model spec from the config and the shape of the tokenised data.
pub fn build_spec(cfg: &RunConfig, data: &[&TokenizedRecording]) -> Result<ModelSpec, CliError> {
    let m = &cfg.model;
    let first = data[0];
    let n_cond = data.iter().map(|t| t.n_conditions()).max().unwrap_or(0) as usize;
    let n_subj = data.iter().map(|t| t.n_subjects()).max().unwrap_or(1) as usize;
    let streams = first.n_streams();
    let vocab = first.vocab_size();
    let spec = match m.family {
        Family::Ar => ModelSpec::Ar(ArSpec::new(m.order.unwrap_or(ArSpec::default().order), streams)),
        Family::Wavenet | Family::WavenetMix => {
            let mut s = if m.family == Family::WavenetMix {
                WavenetSpec::new_mix(streams, vocab, n_cond)
            } else {
                WavenetSpec::new(streams, vocab, n_cond)
            };
            s.hidden = m.hidden.unwrap_or(s.hidden);
            s.skip = m.skip.unwrap_or(s.skip);
            s.stacks = m.stacks.unwrap_or(s.stacks);
            s.layers_per_stack = m.layers_per_stack.unwrap_or(s.layers_per_stack);
            s.condition_embed = m.condition_embed.unwrap_or(s.condition_embed);
            s.subject_embed = m.subject_embed.unwrap_or(if n_subj > 1 { 8 } else { 0 });
            s.n_subjects = n_subj;
            ModelSpec::Wavenet(s)
        }
        Family::ChannelGpt => {
            let mut s = GptSpec::new(streams, vocab, n_cond);
            s.layers = m.layers.unwrap_or(s.layers);
            s.heads = m.heads.unwrap_or(s.heads);
            s.embed = m.embed.unwrap_or(s.embed);
            s.min_ctx = m.min_ctx.unwrap_or(s.min_ctx);
            s.max_ctx = m.max_ctx.unwrap_or(s.max_ctx);
            s.n_subjects = n_subj;
            ModelSpec::ChannelGpt(s)
        }
        Family::FlatGpt => {
            let mut s = FlatGptSpec::new(streams, vocab, n_cond);
            s.layers = m.layers.unwrap_or(s.layers);
            s.heads = m.heads.unwrap_or(s.heads);
            s.embed = m.embed.unwrap_or(s.embed);
            s.min_ctx = m.min_ctx.unwrap_or(s.min_ctx);
            s.max_ctx = m.max_ctx.unwrap_or(s.max_ctx);
            s.n_subjects = n_subj;
            ModelSpec::FlatGpt(s)
        }
    };
    Ok(ablations(cfg).apply_to_spec(&spec))
}

fn ablations(cfg: &RunConfig) -> Ablations {
    let t = &cfg.train;
    Ablations {
        shuffle_condition_labels: t.shuffle_condition_labels,
        single_condition_label: t.single_condition_label,
        disable_channel_embedding: t.disable_channel_embedding,
        disable_condition_embedding: t.disable_condition_embedding,
    }
}

pub fn train_config(cfg: &RunConfig, spec: &ModelSpec) -> TrainConfig {
    let t = &cfg.train;
    let mut tc = TrainConfig::for_spec(spec);
    tc.batch_size = t.batch_size.unwrap_or(tc.batch_size);
    tc.learning_rate = t.learning_rate.unwrap_or(tc.learning_rate);
    tc.grad_clip = t.grad_clip.or(tc.grad_clip);
    tc.max_epochs = t.max_epochs.unwrap_or(tc.max_epochs);
    tc.patience = t.patience.unwrap_or(tc.patience);
    tc.steps_per_epoch = t.steps_per_epoch.or(tc.steps_per_epoch);
    tc.max_val_windows = t.max_val_windows.or(tc.max_val_windows);
    tc.seed = cfg.seed.wrapping_add(2);
    tc.ablations = ablations(cfg);
    tc
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let src = input_stage(Stage::Tokenize, cfg)?;
    let tr = read_tokenized(&src.join("train"))?;
    let va = read_tokenized(&src.join("val"))?;
    let te = read_tokenized(&src.join("test"))?;
    let spec = build_spec(cfg, &[&tr, &va, &te])?;
    let tc = train_config(cfg, &spec);
    tc.validate(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let model = Model::init(&spec, cfg.seed.wrapping_add(3))?;
    let outcome = match model {
        Model::Ar(ar) => {
            let rt = read_rec(&src.join("train_signal"))?;
            let rv = read_rec(&src.join("val_signal"))?;
            train_ar(ar, &rt, &rv, &tc)?
        }
        m => train(m, &tr, &va, &tc)?,
    };
    let dir = open_stage(Stage::Train, cfg, force)?;
    outcome.checkpoint.save(&dir.join("model.ckpt"))?;
    write(&dir.join("model_spec.txt"), &spec.to_text())?;
    let mut hist = String::from("epoch\ttrain_loss\tval_loss\n");
    for e in &outcome.history {
        let _ = writeln!(hist, "{}\t{}\t{}", e.epoch, e.train_loss, e.val_loss);
    }
    write(&dir.join("history.tsv"), &hist)?;
    write(
        &dir.join("summary.txt"),
        &format!(
            "epochs_run = {}\nbest_epoch = {}\nbest_val_loss = {}\nstopped_early = {}\nn_params = {}\n",
            outcome.history.len(),
            outcome.checkpoint.meta.epoch,
            outcome.checkpoint.meta.best_val_loss,
            outcome.stopped_early,
            outcome.checkpoint.model.n_params()
        ),
    )?;
    Ok(dir)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let dir = input_stage(Stage::Train, cfg)?;
    Ok(Checkpoint::load(&dir.join("model.ckpt"))?)
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let ckpt = load_checkpoint(cfg)?;
    let tok_dir = input_stage(Stage::Tokenize, cfg)?;
    let test = read_tokenized(&tok_dir.join("test"))?;
    let g = &cfg.generate;
    let conditions = match g.conditions {
        ConditionMode::Silent => ConditionSource::Silent,
        ConditionMode::TestTrack => ConditionSource::Track(test.condition.clone()),
        ConditionMode::Schedule => ConditionSource::Schedule {
            n_conditions: test.n_conditions(),
            trial_duration_s: g.trial_duration_s,
            iti_s: g.iti_s,
            iti_jitter_s: g.iti_jitter_s,
            lead_in_s: g.lead_in_s,
        },
    };
    let mut plan = GenerationPlan::new(g.duration_s, test.fs, conditions, cfg.seed.wrapping_add(4));
    plan.top_p = g.top_p;
    plan.subject = g.subject;
    plan.channel_names = test.channel_names.clone();
    let out = generate(&ckpt, &plan)?;
    let dir = open_stage(Stage::Generate, cfg, force)?;
    write_recording(&out.recording, &dir.join("recording"))?;
    if let Some(t) = &out.tokens {
        write_tokenized(t, &dir.join("tokens"))?;
    }
    write(&dir.join("plan.txt"), &plan.to_text())?;
    Ok(dir)
}

/// Builds the evaluation report without touching the output directory.
pub fn evaluation_report(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let e = &cfg.eval;
    let reference = if e.reference.is_empty() {
        read_rec(&input_stage(Stage::Tokenize, cfg)?.join("test_signal"))?
    } else {
        read_rec(Path::new(&e.reference))?
    };
    let generated = if e.generated.is_empty() {
        read_rec(&input_stage(Stage::Generate, cfg)?.join("recording"))?
    } else {
        read_rec(Path::new(&e.generated))?
    };
    let mut rep = EvalReport::new();
    rep.put("generated.n_samples", generated.n_samples())
        .put("reference.n_samples", reference.n_samples())
        .put("n_channels", reference.n_channels())
        .put("fs", reference.fs);

    if e.forecast {
        let ckpt = load_checkpoint(cfg)?;
        let tok_dir = input_stage(Stage::Tokenize, cfg)?;
        let test = read_tokenized(&tok_dir.join("test"))?;
        let fm = match &ckpt.model {
            Model::Ar(ar) => {
                let Codec::MuLaw(codec) = &test.codec else {
                    return Err(CliError::Config("the AR baseline is scored with a mu-law codec".into()));
                };
                forecast_metrics_ar(ar, &read_rec(&tok_dir.join("test_signal"))?, codec, e.max_windows)?
            }
            m => {
                let tc = TrainConfig::for_spec(&m.spec());
                forecast_metrics(m, &test, tc.min_ctx, tc.max_ctx, e.max_windows)?
            }
        };
        rep.add_forecast("forecast", &fm);
    }

    rep.add_psd("psd", &psd_compare(&generated, &reference, e.seg_len)?);
    rep.add_covariance("covariance", &covariance_compare(&generated, &reference)?);

    let ge = epoch(&generated, e.t_pre, e.t_post)?;
    let re = epoch(&reference, e.t_pre, e.t_post)?;
    rep.put("evoked.generated_trials", ge.n_trials())
        .put("evoked.reference_trials", re.n_trials());
    if ge.n_trials() > 0 && re.n_trials() > 0 {
        rep.add_evoked("evoked", &evoked_analysis(&ge, &re)?);
    }

    if e.hmm {
        let rd = reference.data_f64();
        let dim = (rd.nrows() * e.tde_embeddings).min(e.tde_pca_dim);
        let (tde, remb) = tde_embed(rd.view(), e.tde_embeddings, dim)?;
        let hcfg = HmmConfig {
            n_states: e.hmm_states,
            restarts: e.hmm_restarts,
            max_iter: e.hmm_max_iter,
            tol: 1e-5,
            seed: cfg.seed.wrapping_add(5),
        };
        let fit = fit_hmm(remb.view(), &hcfg)?;
        let gemb = tde.transform(generated.data_f64().view())?;
        rep.put("states.n_states", e.hmm_states)
            .put("states.tde_dim", dim)
            .put("states.converged", fit.converged)
            .put("states.reference_log_lik_per_sample", fit.model.log_likelihood(remb.view())? / remb.nrows() as f64)
            .put("states.generated_log_lik_per_sample", fit.model.log_likelihood(gemb.view())? / gemb.nrows() as f64);
        let rp = fit.model.viterbi(remb.view())?;
        let gp = fit.model.viterbi(gemb.view())?;
        rep.add_state_stats("states.reference", &summary_stats(&rp, e.hmm_states, reference.fs)?);
        rep.add_state_stats("states.generated", &summary_stats(&gp, e.hmm_states, generated.fs)?);
    }
    Ok(rep)
}

pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let rep = evaluation_report(cfg)?;
    let dir = open_stage(Stage::Eval, cfg, force)?;
    rep.write(&dir)?;
    let tables = dir.join("tables");
    fs::create_dir_all(&tables).map_err(|e| io_err(&tables, e))?;
    for name in rep.arrays.keys() {
        write(&tables.join(format!("{name}.tsv")), &rep.array_tsv(name).expect("array exists"))?;
    }
    Ok(dir)
}

/// The first `n` trials taken round-robin over conditions, in onset order.
pub fn balanced_subset(epochs: &EpochedData, n: usize) -> EpochedData {
    let per: Vec<Vec<usize>> = epochs.condition_set().into_iter().map(|k| epochs.trials_of(k)).collect();
    let mut pick = Vec::with_capacity(n);
    let mut round = 0;
    while pick.len() < n.min(epochs.n_trials()) {
        for list in &per {
            if let Some(&i) = list.get(round) {
                if pick.len() < n {
                    pick.push(i);
                }
            }
        }
        round += 1;
    }
    pick.sort_unstable();
    epochs.select(&pick)
}

pub fn cmd_decode(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let k = &cfg.decode;
    let tok_dir = input_stage(Stage::Tokenize, cfg)?;
    let test_tok = read_tokenized(&tok_dir.join("test"))?;
    let mut rep = EvalReport::new();

    if k.bayes {
        let ckpt = load_checkpoint(cfg)?;
        if let Model::Ar(_) = ckpt.model {
            rep.put("bayes.status", "unsupported_model");
        } else {
            let pre = (k.t_pre * test_tok.fs).round() as usize;
            let post = (k.t_post * test_tok.fs).round() as usize;
            let candidates: Vec<u32> = (1..=test_tok.n_conditions()).collect();
            let d = decode_trials(&ckpt.model, &test_tok, &candidates, pre, post, k.max_trials)?;
            rep.put("bayes.status", "ok")
                .put("bayes.n_trials", d.truths.len())
                .put("bayes.accuracy", d.accuracy)
                .put("bayes.chance", 1.0 / candidates.len() as f64)
                .put("bayes.p_value", d.p_value);
        }
    }

    let finetune = epoch(&read_rec(&tok_dir.join("train_signal"))?, k.t_pre, k.t_post)?;
    let test = epoch(&read_rec(&tok_dir.join("test_signal"))?, k.t_pre, k.t_post)?;
    let generated = epoch(
        &read_rec(&input_stage(Stage::Generate, cfg)?.join("recording"))?,
        k.t_pre,
        k.t_post,
    )?;
    let ccfg = ClassifierConfig {
        learning_rate: k.learning_rate,
        batch_size: k.batch_size,
        max_epochs: k.max_epochs,
        patience: k.patience,
        seed: cfg.seed.wrapping_add(6),
        ..ClassifierConfig::default()
    };
    let mut results = Vec::new();
    for &m in &k.transfer_multiples {
        let want = m * finetune.n_trials();
        let pre = balanced_subset(&generated, want);
        let r = transfer_experiment(&pre, &finetune, &test, &ccfg)?;
        let p = format!("transfer.x{m}");
        rep.put(&format!("{p}.requested_trials"), want)
            .put(&format!("{p}.pretrain_trials"), r.pretrain_trials)
            .put(&format!("{p}.direct"), r.direct)
            .put(&format!("{p}.zero_shot"), r.zero_shot)
            .put(&format!("{p}.finetuned"), r.finetuned);
        results.push(r);
    }
    rep.put("classifier.finetune_trials", finetune.n_trials())
        .put("classifier.test_trials", test.n_trials())
        .put("classifier.generated_trials", generated.n_trials());
    let dir = open_stage(Stage::Decode, cfg, force)?;
    rep.write(&dir)?;
    write(&dir.join("transfer.tsv"), &transfer_table(&results))?;
    Ok(dir)
}

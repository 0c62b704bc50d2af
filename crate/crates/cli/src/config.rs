//! Run configuration: a sectioned TOML document with strict schema checking.
//!
//! Every key has a default, so an empty file is a valid configuration. Keys
//! not in the schema are rejected. Overrides use dotted paths such as
//! `train.learning_rate=0.0005` and are applied to the parsed document before
//! schema checking.

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Directory holding one subdirectory per command.
    pub out: String,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "run".into(),
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Seeded synthetic generator.
    Synthetic,
    /// A recording directory at `data.path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: String,
    pub n_channels: usize,
    pub n_conditions: usize,
    pub n_subjects: usize,
    pub duration_s: f64,
    pub fs: f64,
    pub noise_amplitude: f64,
    /// Standardised values are clipped at ± this before scaling.
    pub clip: f64,
    /// Trials per condition held out for validation and test.
    pub val_trials: usize,
    pub test_trials: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: String::new(),
            n_channels: 8,
            n_conditions: 4,
            n_subjects: 1,
            duration_s: 600.0,
            fs: 100.0,
            noise_amplitude: 0.7,
            clip: 4.0,
            val_trials: 10,
            test_trials: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Mulaw,
    Vq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub mu: f64,
    pub n_bins: usize,
    /// Vector codec: channel buckets, residual stages and bits per stage.
    pub n_buckets: usize,
    pub stages: usize,
    pub bits: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Mulaw,
            mu: 255.0,
            n_bins: 256,
            n_buckets: 4,
            stages: 2,
            bits: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ar,
    Wavenet,
    WavenetMix,
    ChannelGpt,
    FlatGpt,
}

/// Architecture knobs; unset values take the family defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stacks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers_per_stack: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_ctx: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ctx: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::ChannelGpt,
            order: None,
            hidden: None,
            skip: None,
            stacks: None,
            layers_per_stack: None,
            condition_embed: None,
            subject_embed: None,
            layers: None,
            heads: None,
            embed: None,
            min_ctx: None,
            max_ctx: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_val_windows: Option<usize>,
    pub shuffle_condition_labels: bool,
    pub single_condition_label: bool,
    pub disable_channel_embedding: bool,
    pub disable_condition_embedding: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: None,
            learning_rate: None,
            grad_clip: None,
            max_epochs: None,
            patience: None,
            steps_per_epoch: None,
            max_val_windows: Some(256),
            shuffle_condition_labels: false,
            single_condition_label: false,
            disable_channel_embedding: false,
            disable_condition_embedding: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Fresh trial schedule with the timing of the synthetic data.
    Schedule,
    /// Replay the test split's label track.
    TestTrack,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub duration_s: f64,
    pub top_p: f64,
    pub subject: u32,
    pub conditions: ConditionMode,
    pub trial_duration_s: f64,
    pub iti_s: f64,
    pub iti_jitter_s: f64,
    pub lead_in_s: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            duration_s: 300.0,
            top_p: 0.8,
            subject: 1,
            conditions: ConditionMode::Schedule,
            trial_duration_s: 0.5,
            iti_s: 1.0,
            iti_jitter_s: 0.3,
            lead_in_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated recording directory; empty uses the generate command's output.
    pub generated: String,
    /// Reference recording directory; empty uses the preprocessed test split.
    pub reference: String,
    /// Welch segment length in samples.
    pub seg_len: usize,
    /// Score next-sample forecasts of the trained model on the test split.
    pub forecast: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_windows: Option<usize>,
    pub t_pre: f64,
    pub t_post: f64,
    pub hmm: bool,
    pub hmm_states: usize,
    pub hmm_restarts: usize,
    pub hmm_max_iter: usize,
    pub tde_embeddings: usize,
    pub tde_pca_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generated: String::new(),
            reference: String::new(),
            seg_len: 200,
            forecast: true,
            max_windows: Some(200),
            t_pre: 0.1,
            t_post: 0.7,
            hmm: true,
            hmm_states: 12,
            hmm_restarts: 3,
            hmm_max_iter: 200,
            tde_embeddings: 15,
            tde_pca_dim: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub t_pre: f64,
    pub t_post: f64,
    /// Run the generative (Bayes-rule) decoder on the test split.
    pub bayes: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_trials: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Pretraining set sizes as multiples of the real training trials.
    pub transfer_multiples: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            t_pre: 0.1,
            t_post: 0.7,
            bayes: true,
            max_trials: None,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            transfer_multiples: vec![1, 2, 3],
        }
    }
}

impl RunConfig {
    /// Parses a document, applies dotted overrides and checks the schema.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        let d = &self.data;
        if self.seed > i64::MAX as u64 {
            return bad("seed must be below 2^63 (TOML integers are signed 64-bit)");
        }
        if self.out.is_empty() {
            return bad("out must not be empty");
        }
        if d.source == DataSource::File && d.path.is_empty() {
            return bad("data.path is required when data.source = \"file\"");
        }
        if d.n_channels == 0 || d.n_conditions == 0 || d.n_subjects == 0 {
            return bad("data.n_channels, data.n_conditions and data.n_subjects must be positive");
        }
        if !(d.duration_s > 0.0 && d.fs > 0.0 && d.clip > 0.0 && d.noise_amplitude >= 0.0) {
            return bad("data.duration_s, data.fs and data.clip must be positive");
        }
        if d.test_trials == 0 || d.val_trials == 0 {
            return bad("data.val_trials and data.test_trials must be positive");
        }
        let c = &self.codec;
        if !(c.mu > 0.0) || c.n_bins < 2 {
            return bad("codec.mu must be positive and codec.n_bins at least 2");
        }
        if c.n_buckets == 0 || c.stages == 0 || c.bits == 0 {
            return bad("codec.n_buckets, codec.stages and codec.bits must be positive");
        }
        let g = &self.generate;
        if !(g.duration_s > 0.0) || !(g.top_p > 0.0 && g.top_p <= 1.0) || g.subject == 0 {
            return bad("generate.duration_s must be positive, generate.top_p in (0, 1] and generate.subject ≥ 1");
        }
        let e = &self.eval;
        if e.seg_len < 2 || e.hmm_states == 0 || e.hmm_restarts == 0 || e.tde_embeddings == 0 || e.tde_pca_dim == 0 {
            return bad("eval sizes must be positive and eval.seg_len at least 2");
        }
        if !(e.t_pre >= 0.0 && e.t_post > 0.0) {
            return bad("eval.t_pre must be non-negative and eval.t_post positive");
        }
        let k = &self.decode;
        if !(k.t_pre > 0.0 && k.t_post > 0.0) {
            return bad("decode.t_pre and decode.t_post must be positive");
        }
        if k.transfer_multiples.iter().any(|&m| m == 0) {
            return bad("decode.transfer_multiples must be positive");
        }
        let m = &self.model;
        if m.family == Family::FlatGpt && c.kind != CodecKind::Vq {
            return bad("model.family = \"flat_gpt\" needs codec.kind = \"vq\"");
        }
        if m.family != Family::FlatGpt && c.kind != CodecKind::Mulaw {
            return bad("per-channel models need codec.kind = \"mulaw\"");
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it is not one.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} is malformed")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

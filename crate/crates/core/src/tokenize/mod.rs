//! Discretisation of recordings into token streams.
//!
//! Two codecs are provided: a per-channel mu-law scalar quantiser, and a
//! bucketed residual vector quantiser that emits one token per channel group.

mod buckets;
mod flatten;
pub mod kmeans;
mod mulaw;
mod rq;
mod vq;

use std::path::Path;

use ndarray::Array2;

pub use buckets::{kmeans_buckets, BucketAssignment};
pub use flatten::{flatten, unflatten};
pub use mulaw::{mu_law, mu_law_inverse, MuLawCodec};
pub use rq::{ResidualCodebook, RqConfig};
pub use vq::VqCodec;

use crate::error::{Error, Result};
use crate::signal::io::{label_lines, parse_num, read_labels, read_text, write_file};
use crate::signal::Recording;

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    MuLaw(MuLawCodec),
    Vq(VqCodec),
}

impl Codec {
    /// Tokens per stream.
    pub fn vocab_size(&self) -> usize {
        match self {
            Codec::MuLaw(c) => c.n_bins,
            Codec::Vq(c) => c.vocab_size(),
        }
    }

    /// Number of output channels the codec reconstructs.
    pub fn n_channels(&self) -> Option<usize> {
        match self {
            Codec::MuLaw(_) => None,
            Codec::Vq(c) => Some(c.n_channels()),
        }
    }
}

/// Token streams with the codec that produced them and the label tracks.
///
/// For mu-law there is one stream per channel; for the vector codec one per bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRecording {
    /// Streams × samples.
    pub tokens: Array2<u32>,
    pub codec: Codec,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub condition: Vec<u32>,
    pub subject: Vec<u32>,
}

impl TokenizedRecording {
    pub fn n_streams(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.codec.vocab_size()
    }

    pub fn n_conditions(&self) -> u32 {
        self.condition.iter().copied().max().unwrap_or(0)
    }

    pub fn n_subjects(&self) -> u32 {
        self.subject.iter().copied().max().unwrap_or(1)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_samples() {
            return Err(Error::invalid(format!("slice {range:?} outside 0..{}", self.n_samples())));
        }
        Ok(Self {
            tokens: self.tokens.slice(ndarray::s![.., range.clone()]).to_owned(),
            codec: self.codec.clone(),
            fs: self.fs,
            channel_names: self.channel_names.clone(),
            condition: self.condition[range.clone()].to_vec(),
            subject: self.subject[range].to_vec(),
        })
    }
}

/// Mu-law tokens of every sample. Input must already lie in [-1, 1].
pub fn quantize(rec: &Recording, codec: &MuLawCodec) -> Result<TokenizedRecording> {
    let mut tokens = Array2::zeros(rec.data.dim());
    for ((c, t), &x) in rec.data.indexed_iter() {
        tokens[[c, t]] = codec.token(f64::from(x)).map_err(|_| {
            Error::OutOfRange(format!(
                "sample {x} of channel '{}' at {t} is outside [-1, 1]; preprocess first",
                rec.channel_names[c]
            ))
        })?;
    }
    Ok(TokenizedRecording {
        tokens,
        codec: Codec::MuLaw(*codec),
        fs: rec.fs,
        channel_names: rec.channel_names.clone(),
        condition: rec.condition.clone(),
        subject: rec.subject.clone(),
    })
}

/// Bucket tokens of every timestep.
pub fn quantize_vq(rec: &Recording, codec: &VqCodec) -> Result<TokenizedRecording> {
    let tokens = codec.encode(rec.data_f64().view())?;
    Ok(TokenizedRecording {
        tokens,
        codec: Codec::Vq(codec.clone()),
        fs: rec.fs,
        channel_names: rec.channel_names.clone(),
        condition: rec.condition.clone(),
        subject: rec.subject.clone(),
    })
}

/// Continuous reconstruction: bin centres for mu-law, summed code vectors for VQ.
pub fn detokenize(tok: &TokenizedRecording) -> Result<Recording> {
    let data = match &tok.codec {
        Codec::MuLaw(c) => {
            let lut = c.values();
            let mut out = Array2::zeros(tok.tokens.dim());
            for (idx, &q) in tok.tokens.indexed_iter() {
                out[idx] = *lut.get(q as usize).ok_or_else(|| {
                    Error::OutOfRange(format!("token {q} outside vocabulary {}", lut.len()))
                })?;
            }
            out
        }
        Codec::Vq(c) => c.decode(tok.tokens.view())?,
    };
    Recording::from_f64(
        &data,
        tok.fs,
        tok.channel_names.clone(),
        tok.condition.clone(),
        tok.subject.clone(),
    )
}

const TOKENS_FORMAT: &str = "megcast-tokens";
const TOKENS_VERSION: u32 = 1;

/// Writes `header.txt`, `tokens.u32`, label files and, for VQ, `codebook.bin`.
pub fn write_tokenized(tok: &TokenizedRecording, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut h = format!(
        "format: {TOKENS_FORMAT}\nversion: {TOKENS_VERSION}\nfs: {}\nn_streams: {}\nn_samples: {}\n",
        tok.fs,
        tok.n_streams(),
        tok.n_samples()
    );
    match &tok.codec {
        Codec::MuLaw(c) => h.push_str(&format!("codec: mulaw\nmu: {}\nn_bins: {}\n", c.mu, c.n_bins)),
        Codec::Vq(c) => {
            h.push_str("codec: vq\n");
            c.save(&dir.join("codebook.bin"))?;
        }
    }
    for name in &tok.channel_names {
        h.push_str(&format!("channel: {name}\n"));
    }
    write_file(&dir.join("header.txt"), h.as_bytes())?;
    let mut bytes = Vec::with_capacity(tok.tokens.len() * 4);
    for q in tok.tokens.iter() {
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    write_file(&dir.join("tokens.u32"), &bytes)?;
    write_file(&dir.join("condition.txt"), &label_lines(&tok.condition))?;
    write_file(&dir.join("subject.txt"), &label_lines(&tok.subject))?;
    Ok(())
}

pub fn read_tokenized(dir: &Path) -> Result<TokenizedRecording> {
    let hp = dir.join("header.txt");
    let header = read_text(&hp)?;
    let mut kv: Vec<(String, String)> = Vec::new();
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::format(&hp, format!("malformed line {line:?}")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(&hp, format!("missing key {key:?}")))
    };
    if get("format")? != TOKENS_FORMAT {
        return Err(Error::format(&hp, "not a token header"));
    }
    let version = get("version")?;
    if version != TOKENS_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            expected: TOKENS_VERSION.to_string(),
        });
    }
    let fs: f64 = parse_num(&hp, get("fs")?)?;
    let streams: usize = parse_num(&hp, get("n_streams")?)?;
    let samples: usize = parse_num(&hp, get("n_samples")?)?;
    let codec = match get("codec")? {
        "mulaw" => Codec::MuLaw(MuLawCodec::new(
            parse_num(&hp, get("mu")?)?,
            parse_num(&hp, get("n_bins")?)?,
        )?),
        "vq" => Codec::Vq(VqCodec::load(&dir.join("codebook.bin"))?),
        other => return Err(Error::format(&hp, format!("unknown codec {other:?}"))),
    };
    let names: Vec<String> = kv.iter().filter(|(k, _)| k == "channel").map(|(_, v)| v.clone()).collect();
    let tp = dir.join("tokens.u32");
    let bytes = std::fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
    if bytes.len() != streams * samples * 4 {
        return Err(Error::format(&tp, "token file size does not match header"));
    }
    let vals: Vec<u32> = bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    if vals.iter().any(|&q| q as usize >= codec.vocab_size()) {
        return Err(Error::format(&tp, "token outside vocabulary"));
    }
    let tokens = Array2::from_shape_vec((streams, samples), vals).map_err(|e| Error::shape(e.to_string()))?;
    let condition = read_labels(&dir.join("condition.txt"))?;
    let subject = read_labels(&dir.join("subject.txt"))?;
    if condition.len() != samples || subject.len() != samples {
        return Err(Error::format(dir, "label tracks do not match token length"));
    }
    Ok(TokenizedRecording { tokens, codec, fs, channel_names: names, condition, subject })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{epoch, preprocess, synthesize, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_middle_bin() {
        assert_eq!(MuLawCodec::default().token(0.0).unwrap(), 128);
    }

    #[test]
    fn unpreprocessed_input_is_rejected() {
        let rec = Recording::unlabeled(ndarray::array![[0.5f32, 1.5]], 10.0).unwrap();
        assert!(matches!(quantize(&rec, &MuLawCodec::default()), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn evoked_response_survives_round_trip() {
        let raw = synthesize(&SyntheticSpec::desk(4, 2, 120.0, 11)).unwrap();
        let rec = preprocess(&raw, 4.0).unwrap();
        let back = detokenize(&quantize(&rec, &MuLawCodec::default()).unwrap()).unwrap();
        let a = epoch(&rec, 0.0, 1.0).unwrap();
        let b = epoch(&back, 0.0, 1.0).unwrap();
        for cond in 1..=2 {
            let ma = a.mean_of(&a.trials_of(cond));
            let mb = b.mean_of(&b.trials_of(cond));
            let r = pearson(ma.iter().copied(), mb.iter().copied());
            assert!(r > 0.99, "condition {cond}: r = {r}");
        }
    }

    fn pearson(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
        let (a, b): (Vec<f64>, Vec<f64>) = (a.collect(), b.collect());
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn mulaw_directory_round_trip() {
        let rec = preprocess(&synthesize(&SyntheticSpec::desk(3, 2, 10.0, 1)).unwrap(), 4.0).unwrap();
        let tok = quantize(&rec, &MuLawCodec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tokenized(&tok, dir.path()).unwrap();
        assert_eq!(read_tokenized(dir.path()).unwrap(), tok);
    }

    #[test]
    fn vq_directory_round_trip() {
        let rec = preprocess(&synthesize(&SyntheticSpec::desk(4, 2, 10.0, 1)).unwrap(), 4.0).unwrap();
        let codec = VqCodec::fit(&rec, 2, &RqConfig::new(2, 3, 0)).unwrap();
        let tok = quantize_vq(&rec, &codec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tokenized(&tok, dir.path()).unwrap();
        let back = read_tokenized(dir.path()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(detokenize(&back).unwrap().n_channels(), 4);
    }

    proptest! {
        #[test]
        fn round_trip_within_one_bin(x in -1.0f64..=1.0) {
            let c = MuLawCodec::default();
            let q = c.token(x).unwrap();
            let y = mu_law(x, c.mu).unwrap();
            let yc = mu_law(c.value(q).unwrap(), c.mu).unwrap();
            prop_assert!((y - yc).abs() <= c.companded_width() / 2.0 + 1e-12);
        }

        #[test]
        fn monotone(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
            let c = MuLawCodec::default();
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(c.token(lo).unwrap() <= c.token(hi).unwrap());
        }

        #[test]
        fn detokenised_values_inside_open_interval(q in 0u32..256) {
            let v = MuLawCodec::default().value(q).unwrap();
            prop_assert!(v > -1.0 && v < 1.0);
        }
    }
}

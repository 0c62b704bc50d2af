//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "MCKP" | u16 major | u16 minor
//! block  spec text
//! block  metadata text
//! u8     codec kind (0 none, 1 mu-law, 2 vector)   + payload
//! block  manifest text, one "name rows cols" line per parameter
//! u64    scalar count, then that many f32 values
//! ```
//!
//! A block is a u32 byte length followed by the bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::spec_text::{KvReader, KvWriter};
use crate::models::{Model, ModelSpec};
use crate::signal::io::{put_u32, write_file, ByteReader};
use crate::tokenize::{Codec, MuLawCodec, VqCodec};

const MAGIC: &[u8; 4] = b"MCKP";
const MAJOR: u16 = 1;
const MINOR: u16 = 0;

/// Bookkeeping stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    /// Epoch whose parameters are stored, counted from 1; 0 for an untrained model.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub optimizer_steps: u64,
    pub seed: u64,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            optimizer_steps: 0,
            seed: 0,
        }
    }
}

/// A model with the codec of its training data and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub codec: Option<Codec>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    /// Parameters are rounded to `f32`, the stored precision, so a saved and
    /// reloaded checkpoint behaves exactly like this one.
    pub fn new(mut model: Model, codec: Option<Codec>, meta: TrainingMeta) -> Self {
        model.params_mut().round_to_f32();
        Self { model, codec, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MAJOR.to_le_bytes());
        out.extend_from_slice(&MINOR.to_le_bytes());
        put_block(&mut out, self.model.spec().to_text().as_bytes());
        let meta = KvWriter::new("checkpoint")
            .put("epoch", self.meta.epoch)
            .put("best_val_loss", self.meta.best_val_loss)
            .put("optimizer_steps", self.meta.optimizer_steps)
            .put("seed", self.meta.seed)
            .finish();
        put_block(&mut out, meta.as_bytes());
        match &self.codec {
            None => out.push(0),
            Some(Codec::MuLaw(c)) => {
                out.push(1);
                out.extend_from_slice(&c.mu.to_le_bytes());
                out.extend_from_slice(&(c.n_bins as u64).to_le_bytes());
            }
            Some(Codec::Vq(c)) => {
                out.push(2);
                let b = c.to_bytes();
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(&b);
            }
        }
        let params = self.model.params();
        let manifest: String = params
            .shapes()
            .iter()
            .map(|(n, (r, c))| format!("{n} {r} {c}\n"))
            .collect();
        put_block(&mut out, manifest.as_bytes());
        let blob = params.to_f32_blob();
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint file"));
        }
        let major = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        let minor = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if major != MAJOR {
            return Err(Error::Version {
                found: format!("{major}.{minor}"),
                expected: format!("{MAJOR}.{MINOR}"),
            });
        }
        let text = |b: &[u8]| {
            std::str::from_utf8(b)
                .map(str::to_owned)
                .map_err(|_| Error::format(origin, "text block is not UTF-8"))
        };
        let spec_text = text(r.block()?)?;
        let spec = ModelSpec::from_text(&spec_text).map_err(|e| Error::format(origin, e.to_string()))?;
        let meta_kv = KvReader::parse(&text(r.block()?)?).map_err(|e| Error::format(origin, e.to_string()))?;
        let field = |e: Error| Error::format(origin, e.to_string());
        let meta = TrainingMeta {
            epoch: meta_kv.get("epoch").map_err(field)?,
            best_val_loss: meta_kv.get("best_val_loss").map_err(field)?,
            optimizer_steps: meta_kv.get("optimizer_steps").map_err(field)?,
            seed: meta_kv.get("seed").map_err(field)?,
        };
        let codec = match r.u8()? {
            0 => None,
            1 => {
                let mu = r.f64()?;
                let n_bins = r.u64()? as usize;
                Some(Codec::MuLaw(MuLawCodec::new(mu, n_bins).map_err(field)?))
            }
            2 => {
                let n = r.u64()?;
                if n > r.remaining() as u64 {
                    return Err(Error::format(origin, "codec larger than file"));
                }
                Some(Codec::Vq(VqCodec::from_bytes(r.take(n as usize)?, origin)?))
            }
            k => return Err(Error::format(origin, format!("unknown codec kind {k}"))),
        };
        let manifest = text(r.block()?)?;
        let mut model = Model::init(&spec, 0).map_err(field)?;
        let expected: String = model
            .params()
            .shapes()
            .iter()
            .map(|(n, (a, b))| format!("{n} {a} {b}\n"))
            .collect();
        if manifest != expected {
            return Err(Error::format(origin, "parameter manifest does not match the model spec"));
        }
        let n = r.u64()?;
        if n != model.n_params() as u64 || r.remaining() as u64 != n * 4 {
            return Err(Error::format(origin, "parameter blob has the wrong size"));
        }
        let blob: Vec<f32> = (0..n).map(|_| r.f32()).collect::<Result<_>>()?;
        model.params_mut().load_f32_blob(&blob)?;
        Ok(Self { model, codec, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

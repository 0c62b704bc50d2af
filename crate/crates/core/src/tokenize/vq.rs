//! Bucketed residual vector quantisation of all channels at one timestep.
//!
//! Binary layout of a saved codec (little endian):
//!
//! ```text
//! "MCVQ"  u32 version  u32 n_channels  u32 n_buckets  u32 bucket_of[n_channels]
//! per bucket: u32 dim  u32 stages  per stage: u32 K  f32 table[K * dim]
//! ```

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::buckets::{kmeans_buckets, BucketAssignment};
use super::rq::{ResidualCodebook, RqConfig};
use crate::error::{Error, Result};
use crate::signal::io::{put_u32, ByteReader};
use crate::signal::{channel_covariance, Recording};

const MAGIC: &[u8; 4] = b"MCVQ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VqCodec {
    pub buckets: BucketAssignment,
    /// One codebook per bucket, in bucket order.
    pub codebooks: Vec<ResidualCodebook>,
}

impl VqCodec {
    pub fn new(buckets: BucketAssignment, codebooks: Vec<ResidualCodebook>) -> Result<Self> {
        if codebooks.len() != buckets.n_buckets {
            return Err(Error::shape("one codebook per bucket required"));
        }
        for (b, cb) in codebooks.iter().enumerate() {
            if cb.dim() != buckets.members(b).len() {
                return Err(Error::shape(format!("codebook {b} has the wrong dimension")));
            }
        }
        Ok(Self { buckets, codebooks })
    }

    /// Buckets channels by covariance, then fits a residual quantiser per bucket.
    pub fn fit(rec: &Recording, n_buckets: usize, rq: &RqConfig) -> Result<Self> {
        let buckets = kmeans_buckets(&channel_covariance(rec), n_buckets, rq.seed)?;
        let data = rec.data_f64();
        let codebooks = (0..buckets.n_buckets)
            .map(|b| {
                let x = bucket_vectors(data.view(), &buckets.members(b));
                let cfg = RqConfig {
                    seed: rq.seed.wrapping_add(1000 * (b as u64 + 1)),
                    ..rq.clone()
                };
                ResidualCodebook::fit(x.view(), &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(buckets, codebooks)
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.n_buckets
    }

    pub fn n_channels(&self) -> usize {
        self.buckets.n_channels()
    }

    /// Vocabulary of a single bucket. All buckets share it when fitted with one config.
    pub fn vocab_size(&self) -> usize {
        self.codebooks.iter().map(|c| c.vocab_size()).max().unwrap_or(0)
    }

    /// Channels × samples into buckets × samples tokens.
    pub fn encode(&self, data: ArrayView2<f64>) -> Result<Array2<u32>> {
        if data.nrows() != self.n_channels() {
            return Err(Error::shape(format!(
                "{} channels given to a codec for {}",
                data.nrows(),
                self.n_channels()
            )));
        }
        let mut out = Array2::zeros((self.n_buckets(), data.ncols()));
        for (b, cb) in self.codebooks.iter().enumerate() {
            let x = bucket_vectors(data, &self.buckets.members(b));
            for (t, row) in x.rows().into_iter().enumerate() {
                out[[b, t]] = cb.encode_token(row)?;
            }
        }
        Ok(out)
    }

    /// Buckets × samples tokens back to channels × samples values.
    pub fn decode(&self, tokens: ArrayView2<u32>) -> Result<Array2<f64>> {
        if tokens.nrows() != self.n_buckets() {
            return Err(Error::shape("token rows must equal the number of buckets"));
        }
        let mut out = Array2::zeros((self.n_channels(), tokens.ncols()));
        for (b, cb) in self.codebooks.iter().enumerate() {
            let members = self.buckets.members(b);
            for t in 0..tokens.ncols() {
                let v: Array1<f64> = cb.decode_token(tokens[[b, t]])?;
                for (k, &c) in members.iter().enumerate() {
                    out[[c, t]] = v[k];
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.n_channels() as u32);
        put_u32(&mut out, self.n_buckets() as u32);
        for &b in &self.buckets.bucket_of {
            put_u32(&mut out, b as u32);
        }
        for cb in &self.codebooks {
            put_u32(&mut out, cb.dim() as u32);
            put_u32(&mut out, cb.n_stages() as u32);
            for t in &cb.tables {
                put_u32(&mut out, t.nrows() as u32);
                for &v in t.iter() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not a codebook file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let c = r.u32()? as usize;
        let b = r.u32()? as usize;
        let labels = (0..c).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let buckets = BucketAssignment::from_labels(&labels)?;
        if buckets.bucket_of != labels || buckets.n_buckets != b {
            return Err(Error::format(origin, "bucket ids are not in canonical order"));
        }
        let mut codebooks = Vec::with_capacity(b);
        for _ in 0..b {
            let dim = r.u32()? as usize;
            let stages = r.u32()? as usize;
            let mut tables = Vec::with_capacity(stages);
            for _ in 0..stages {
                let k = r.u32()? as usize;
                let n = k
                    .checked_mul(dim)
                    .filter(|n| n.saturating_mul(4) <= r.remaining())
                    .ok_or_else(|| Error::format(origin, "table larger than file"))?;
                let vals = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
                tables.push(Array2::from_shape_vec((k, dim), vals).map_err(|e| Error::shape(e.to_string()))?);
            }
            codebooks.push(ResidualCodebook::from_tables(tables)?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(origin, "trailing bytes"));
        }
        Self::new(buckets, codebooks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::signal::io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Rows are timesteps, columns the member channels.
fn bucket_vectors(data: ArrayView2<f64>, members: &[usize]) -> Array2<f64> {
    data.select(Axis(0), members).reversed_axes()
}

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans, nearest, KMeansConfig};
use crate::error::{Error, Result};

/// Fitting controls for a residual quantiser.
#[derive(Debug, Clone, PartialEq)]
pub struct RqConfig {
    pub stages: usize,
    pub bits: Vec<u32>,
    pub restarts: usize,
    pub max_iter: usize,
    /// Training vectors are subsampled to at most this many.
    pub max_points: usize,
    pub seed: u64,
}

impl RqConfig {
    pub fn new(stages: usize, bits: u32, seed: u64) -> Self {
        Self {
            stages,
            bits: vec![bits; stages],
            restarts: 1,
            max_iter: 50,
            max_points: 20_000,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.bits.len() != self.stages {
            return Err(Error::invalid("one bit width per stage required"));
        }
        if self.bits.iter().any(|&b| b == 0 || b > 16) {
            return Err(Error::invalid("bits per table must be in 1..=16"));
        }
        let total: u32 = self.bits.iter().sum();
        if total > 31 {
            return Err(Error::invalid("combined code does not fit in 31 bits"));
        }
        Ok(())
    }
}

/// Additive residual quantiser for one bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCodebook {
    /// Stage tables, `K_m × dim`. Entries are representable in f32.
    pub tables: Vec<Array2<f64>>,
}

impl ResidualCodebook {
    pub fn from_tables(tables: Vec<Array2<f64>>) -> Result<Self> {
        let dim = tables.first().map(|t| t.ncols()).unwrap_or(0);
        if tables.is_empty() || dim == 0 {
            return Err(Error::invalid("codebook needs at least one non-empty table"));
        }
        if tables.iter().any(|t| t.ncols() != dim || t.nrows() == 0) {
            return Err(Error::shape("all tables must share the vector dimension"));
        }
        let cb = Self { tables };
        if cb.vocab_size() > u32::MAX as usize / 2 {
            return Err(Error::invalid("vocabulary too large"));
        }
        Ok(cb)
    }

    /// Greedy stage-wise fit: each table is k-means on the residual left by earlier stages.
    pub fn fit(x: ArrayView2<f64>, cfg: &RqConfig) -> Result<Self> {
        cfg.validate()?;
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("no training vectors"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut residual = if x.nrows() > cfg.max_points {
            let mut idx = sample(&mut rng, x.nrows(), cfg.max_points).into_vec();
            idx.sort_unstable();
            x.select(Axis(0), &idx)
        } else {
            x.to_owned()
        };
        let mut tables = Vec::with_capacity(cfg.stages);
        for (m, &bits) in cfg.bits.iter().enumerate() {
            let k = 1usize << bits;
            let kc = KMeansConfig {
                k: k.min(residual.nrows()),
                restarts: cfg.restarts,
                max_iter: cfg.max_iter,
                seed: cfg.seed.wrapping_add(1 + m as u64),
            };
            let fit = kmeans(residual.view(), &kc)?;
            let mut table = Array2::zeros((k, x.ncols()));
            for j in 0..k {
                // pad short tables by repeating fitted centroids
                table.row_mut(j).assign(&fit.centroids.row(j % kc.k));
            }
            table.mapv_inplace(|v| v as f32 as f64);
            for mut r in residual.rows_mut() {
                let (j, _) = nearest(table.view(), r.view());
                r -= &table.row(j);
            }
            tables.push(table);
        }
        Self::from_tables(tables)
    }

    pub fn dim(&self) -> usize {
        self.tables[0].ncols()
    }

    pub fn n_stages(&self) -> usize {
        self.tables.len()
    }

    pub fn table_sizes(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.nrows()).collect()
    }

    /// Number of distinct combined codes, the product of table sizes.
    pub fn vocab_size(&self) -> usize {
        self.tables.iter().map(|t| t.nrows()).product()
    }

    pub fn bits(&self) -> Vec<f64> {
        self.tables.iter().map(|t| (t.nrows() as f64).log2()).collect()
    }

    /// Stage indices chosen greedily against the running residual.
    pub fn encode(&self, x: ArrayView1<f64>) -> Result<Vec<usize>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector of length {} given to a codebook of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut r = x.to_owned();
        let mut codes = Vec::with_capacity(self.tables.len());
        for t in &self.tables {
            let (j, _) = nearest(t.view(), r.view());
            r -= &t.row(j);
            codes.push(j);
        }
        Ok(codes)
    }

    pub fn decode(&self, codes: &[usize]) -> Result<Array1<f64>> {
        if codes.len() != self.tables.len() {
            return Err(Error::shape("one code per stage required"));
        }
        let mut out = Array1::zeros(self.dim());
        for (t, &j) in self.tables.iter().zip(codes) {
            if j >= t.nrows() {
                return Err(Error::OutOfRange(format!("code {j} for a table of {}", t.nrows())));
            }
            out += &t.row(j);
        }
        Ok(out)
    }

    /// Mixed-radix combination, first stage least significant.
    pub fn combine(&self, codes: &[usize]) -> u32 {
        let mut token = 0usize;
        let mut radix = 1usize;
        for (t, &j) in self.tables.iter().zip(codes) {
            token += j * radix;
            radix *= t.nrows();
        }
        token as u32
    }

    pub fn split(&self, token: u32) -> Result<Vec<usize>> {
        let mut rest = token as usize;
        if rest >= self.vocab_size() {
            return Err(Error::OutOfRange(format!(
                "token {token} outside vocabulary {}",
                self.vocab_size()
            )));
        }
        Ok(self
            .tables
            .iter()
            .map(|t| {
                let j = rest % t.nrows();
                rest /= t.nrows();
                j
            })
            .collect())
    }

    pub fn encode_token(&self, x: ArrayView1<f64>) -> Result<u32> {
        Ok(self.combine(&self.encode(x)?))
    }

    pub fn decode_token(&self, token: u32) -> Result<Array1<f64>> {
        self.decode(&self.split(token)?)
    }

    /// Mean squared reconstruction error per coordinate over the rows of `x`.
    pub fn mse(&self, x: ArrayView2<f64>) -> Result<f64> {
        let mut total = 0.0;
        for row in x.rows() {
            let rec = self.decode(&self.encode(row)?)?;
            total += (&rec - &row).mapv(|v| v * v).sum();
        }
        Ok(total / (x.len().max(1)) as f64)
    }
}

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Time-delay embedding followed by a PCA projection, fitted on one series and
/// reusable on others.
#[derive(Debug, Clone, PartialEq)]
pub struct TdeEmbedding {
    pub n_channels: usize,
    pub n_embeddings: usize,
    /// Mean of the lag-stacked rows.
    pub mean: Array1<f64>,
    /// (channels · n_embeddings) × pca_dim, orthonormal columns.
    pub components: Array2<f64>,
    /// Variance captured by each component.
    pub explained: Vec<f64>,
}

impl TdeEmbedding {
    /// Samples lost at each end of the series.
    pub fn half_width(&self) -> usize {
        self.n_embeddings / 2
    }

    pub fn pca_dim(&self) -> usize {
        self.components.ncols()
    }

    /// Fits the projection on `data` (channels × samples).
    pub fn fit(data: ArrayView2<f64>, n_embeddings: usize, pca_dim: usize) -> Result<Self> {
        let stacked = lag_stack(data, n_embeddings)?;
        let d = stacked.ncols();
        if pca_dim == 0 || pca_dim > d {
            return Err(Error::invalid(format!("PCA dimension {pca_dim} outside 1..={d}")));
        }
        let n = stacked.nrows() as f64;
        let mean = stacked.sum_axis(ndarray::Axis(0)) / n;
        let centred = &stacked - &mean;
        let cov = centred.t().dot(&centred) / n;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
        let mut components = Array2::zeros((d, pca_dim));
        let mut explained = Vec::with_capacity(pca_dim);
        for (k, &i) in order.iter().take(pca_dim).enumerate() {
            let v = eig.eigenvectors.column(i);
            // sign convention: the largest-magnitude entry is positive
            let mut big = 0;
            for r in 0..d {
                if v[r].abs() > v[big].abs() {
                    big = r;
                }
            }
            let s = if v[big] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components[[r, k]] = s * v[r];
            }
            explained.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            n_channels: data.nrows(),
            n_embeddings,
            mean,
            components,
            explained,
        })
    }

    /// Embedded series, (samples − n_embeddings + 1) × pca_dim. Row i corresponds
    /// to input sample i + half_width().
    pub fn transform(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        if data.nrows() != self.n_channels {
            return Err(Error::shape(format!(
                "{} channels, embedding fitted on {}",
                data.nrows(),
                self.n_channels
            )));
        }
        let stacked = lag_stack(data, self.n_embeddings)?;
        Ok((&stacked - &self.mean).dot(&self.components))
    }

    /// Maps embedded rows back to lag-stacked rows.
    pub fn inverse(&self, embedded: ArrayView2<f64>) -> Array2<f64> {
        embedded.dot(&self.components.t()) + &self.mean
    }
}

/// Rows [x(t − h), …, x(t + h)] for every t with a full window, h = (n − 1) / 2.
/// Columns are ordered lag-major: all channels at the first lag, then the next.
pub fn lag_stack(data: ArrayView2<f64>, n_embeddings: usize) -> Result<Array2<f64>> {
    if n_embeddings % 2 == 0 {
        return Err(Error::invalid(format!("number of embeddings must be odd, got {n_embeddings}")));
    }
    let (c, t) = data.dim();
    if t < n_embeddings + 1 {
        return Err(Error::invalid(format!(
            "series of {t} samples is too short for {n_embeddings} embeddings"
        )));
    }
    let rows = t - n_embeddings + 1;
    Ok(Array2::from_shape_fn((rows, c * n_embeddings), |(i, j)| {
        let (lag, ch) = (j / c, j % c);
        data[[ch, i + lag]]
    }))
}

/// Lag-stacks and projects a series in one call, fitting the PCA on it.
pub fn tde_embed(data: ArrayView2<f64>, n_embeddings: usize, pca_dim: usize) -> Result<(TdeEmbedding, Array2<f64>)> {
    let emb = TdeEmbedding::fit(data, n_embeddings, pca_dim)?;
    let out = emb.transform(data)?;
    Ok((emb, out))
}

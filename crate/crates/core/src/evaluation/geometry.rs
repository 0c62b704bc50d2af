use ndarray::{Array2, ArrayView2};

use super::{pearson, TdeEmbedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGeometry {
    /// Correlation of pairwise distances in embedding space and physical space.
    pub distance_correlation: f64,
    /// First two principal components of the embedding rows, channels × 2.
    pub projection: Array2<f64>,
}

fn pairwise(x: ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(d.sqrt());
        }
    }
    out
}

/// Pearson correlation between the pairwise Euclidean distances of the rows of `a` and of `b`.
pub fn distance_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!("{} rows vs {} rows", a.nrows(), b.nrows())));
    }
    if a.nrows() < 3 {
        return Err(Error::invalid("at least three points are required"));
    }
    Ok(pearson(&pairwise(a), &pairwise(b)))
}

/// Rows of `x` projected on their first two principal components. Inputs with
/// a single column get a zero second coordinate.
pub fn pca_2d(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let dim = x.ncols().min(2);
    let emb = TdeEmbedding::fit(x.t(), 1, dim)?;
    let y = emb.transform(x.t())?;
    let mut out = Array2::zeros((x.nrows(), 2));
    out.slice_mut(ndarray::s![.., ..dim]).assign(&y);
    Ok(out)
}

/// Compares a channel embedding table (channels × width) with sensor
/// coordinates (channels × spatial dims).
pub fn embedding_geometry(table: ArrayView2<f64>, coords: Option<ArrayView2<f64>>) -> Result<EmbeddingGeometry> {
    let coords = coords.ok_or_else(|| Error::invalid("channel coordinates are required"))?;
    Ok(EmbeddingGeometry {
        distance_correlation: distance_correlation(table, coords)?,
        projection: pca_2d(table)?,
    })
}

use ndarray::Array2;

use super::kmeans::{kmeans, KMeansConfig};
use crate::error::{Error, Result};

/// Partition of channels into buckets quantised jointly.
///
/// Buckets are numbered by their lowest channel index, so the ordering is
/// canonical for a given partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketAssignment {
    /// Bucket id of each channel.
    pub bucket_of: Vec<usize>,
    pub n_buckets: usize,
}

impl BucketAssignment {
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut remap: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let bucket_of = labels
            .iter()
            .map(|&l| {
                *remap[l].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        if next == 0 {
            return Err(Error::invalid("no channels to bucket"));
        }
        Ok(Self {
            bucket_of,
            n_buckets: next,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.bucket_of.len()
    }

    /// Channels of bucket `b` in ascending order.
    pub fn members(&self, b: usize) -> Vec<usize> {
        (0..self.bucket_of.len())
            .filter(|&c| self.bucket_of[c] == b)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.n_buckets).map(|b| self.members(b).len()).collect()
    }
}

/// Groups channels by k-means on the rows of their covariance matrix.
pub fn kmeans_buckets(cov: &Array2<f64>, n_buckets: usize, seed: u64) -> Result<BucketAssignment> {
    let c = cov.nrows();
    if cov.ncols() != c {
        return Err(Error::shape("covariance must be square"));
    }
    if n_buckets == 0 || n_buckets > c {
        return Err(Error::invalid(format!(
            "cannot form {n_buckets} buckets from {c} channels"
        )));
    }
    let fit = kmeans(cov.view(), &KMeansConfig::new(n_buckets, seed))?;
    let mut labels = fit.assignment;
    // make every bucket non-empty by moving the worst-fitting channel of the largest bucket
    loop {
        let mut counts = vec![0usize; n_buckets];
        for &l in &labels {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            break;
        };
        let largest = (0..n_buckets).max_by_key(|&b| (counts[b], usize::MAX - b)).unwrap();
        let donor = (0..c)
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                let da = dist(cov, &fit.centroids, a, largest);
                let db = dist(cov, &fit.centroids, b, largest);
                da.total_cmp(&db)
            })
            .unwrap();
        labels[donor] = empty;
    }
    BucketAssignment::from_labels(&labels)
}

fn dist(cov: &Array2<f64>, centroids: &Array2<f64>, i: usize, b: usize) -> f64 {
    cov.row(i)
        .iter()
        .zip(centroids.row(b).iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

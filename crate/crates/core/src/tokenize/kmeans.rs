//! Lloyd's k-means with k-means++ seeding and best-of-R restarts.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 5,
            max_iter: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// k × dims
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (lowest index on ties) and its squared distance.
pub fn nearest(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters the rows of `points`. Requires 1 ≤ k ≤ number of rows.
pub fn kmeans(points: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = points.nrows();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::invalid(format!(
            "k = {} must be between 1 and the number of points {n}",
            cfg.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..cfg.restarts.max(1) {
        let fit = lloyd(points, cfg.k, cfg.max_iter, &mut rng);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

fn lloyd(points: ArrayView2<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let (n, dims) = points.dim();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, _) = nearest(centroids.view(), p);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dims));
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignment[i]);
            row += &p;
            counts[assignment[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mut row = centroids.row_mut(j);
                row.assign(&sums.row(j));
                row /= counts[j] as f64;
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assignment[a]));
                        let db = sq_dist(points.row(b), centroids.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n ≥ 1");
                centroids.row_mut(j).assign(&points.row(far));
                assignment[far] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (i, p) in points.rows().into_iter().enumerate() {
        assignment[i] = nearest(centroids.view(), p).0;
    }
    let inertia = points
        .rows()
        .into_iter()
        .zip(&assignment)
        .map(|(p, &j)| sq_dist(p, centroids.row(j)))
        .sum();
    KMeansFit {
        centroids,
        assignment,
        inertia,
    }
}

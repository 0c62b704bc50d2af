//! Gaussian hidden Markov model with full covariances, fitted by Baum-Welch.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tokenize::kmeans::{kmeans, KMeansConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub n_states: usize,
    /// Independent k-means initialisations; the best final likelihood wins.
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative change of the log-likelihood that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl HmmConfig {
    pub fn new(n_states: usize, seed: u64) -> Self {
        Self {
            n_states,
            restarts: 3,
            max_iter: 200,
            tol: 1e-5,
            seed,
        }
    }
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self::new(12, 0)
    }
}

/// Cached factorisation of one state's covariance.
#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    /// Transposed inverse Cholesky factor: (x − μ)·whiten has identity covariance.
    whiten: Array2<f64>,
    log_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    /// states × dims
    pub means: Array2<f64>,
    pub covs: Vec<Array2<f64>>,
    /// Row-stochastic, states × states.
    pub trans: Array2<f64>,
    pub init: Array1<f64>,
    gauss: Vec<Gaussian>,
}

const MAX_JITTER_STEPS: usize = 12;

/// Cholesky with escalating diagonal jitter. Returns the (possibly regularised)
/// covariance and its factor data.
fn factor(cov: &Array2<f64>) -> Result<(Array2<f64>, Gaussian)> {
    let d = cov.nrows();
    let scale = (cov.diag().sum() / d as f64).abs().max(1e-12);
    let mut jitter = 0.0;
    for step in 0..=MAX_JITTER_STEPS {
        let mut c = cov.clone();
        for i in 0..d {
            c[[i, i]] += jitter;
        }
        let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (c[[i, j]] + c[[j, i]]));
        if let Some(ch) = m.clone().cholesky() {
            let l = ch.l();
            let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
            if log_det.is_finite() {
                let linv = l
                    .solve_lower_triangular(&DMatrix::identity(d, d))
                    .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
                let whiten = Array2::from_shape_fn((d, d), |(i, j)| linv[(j, i)]);
                let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
                let sym = Array2::from_shape_fn((d, d), |(i, j)| m[(i, j)]);
                return Ok((sym, Gaussian { whiten, log_norm }));
            }
        }
        jitter = scale * 1e-10 * 10f64.powi(step as i32);
    }
    Err(Error::Numerical(format!(
        "covariance is singular even after jitter of {jitter:.3e}"
    )))
}

impl HmmModel {
    pub fn new(means: Array2<f64>, covs: Vec<Array2<f64>>, trans: Array2<f64>, init: Array1<f64>) -> Result<Self> {
        let (k, d) = means.dim();
        if covs.len() != k || trans.dim() != (k, k) || init.len() != k {
            return Err(Error::shape("HMM parameter shapes disagree"));
        }
        if covs.iter().any(|c| c.dim() != (d, d)) {
            return Err(Error::shape("covariance dimension differs from the means"));
        }
        for r in trans.rows() {
            if (r.sum() - 1.0).abs() > 1e-9 || r.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("transition rows must be distributions"));
            }
        }
        if (init.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("initial distribution must sum to 1"));
        }
        let mut fixed = Vec::with_capacity(k);
        let mut gauss = Vec::with_capacity(k);
        for c in &covs {
            let (c2, g) = factor(c)?;
            fixed.push(c2);
            gauss.push(g);
        }
        Ok(Self {
            means,
            covs: fixed,
            trans,
            init,
            gauss,
        })
    }

    pub fn n_states(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(format!("series has {} dims, model {}", x.ncols(), self.dim())));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty series"));
        }
        Ok(())
    }

    /// Log density of every sample under every state, samples × states.
    pub fn log_emissions(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = Array2::zeros((x.nrows(), self.n_states()));
        for (k, g) in self.gauss.iter().enumerate() {
            let centred = &x - &self.means.row(k);
            let z = centred.dot(&g.whiten);
            for (t, row) in z.rows().into_iter().enumerate() {
                out[[t, k]] = g.log_norm - 0.5 * row.dot(&row);
            }
        }
        Ok(out)
    }

    fn forward_backward(&self, log_b: &Array2<f64>) -> Passes {
        let (t_len, k) = log_b.dim();
        let mut b = log_b.clone();
        let mut shift = vec![0.0; t_len];
        for (t, mut row) in b.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            shift[t] = m;
            row.mapv_inplace(|v| (v - m).exp());
        }
        let mut alpha = Array2::zeros((t_len, k));
        let mut c = vec![0.0; t_len];
        for t in 0..t_len {
            let prior = if t == 0 {
                self.init.clone()
            } else {
                alpha.row(t - 1).dot(&self.trans)
            };
            let mut a = prior * &b.row(t);
            let s = a.sum();
            c[t] = s;
            if s > 0.0 {
                a /= s;
            }
            alpha.row_mut(t).assign(&a);
        }
        let mut beta = Array2::ones((t_len, k));
        for t in (0..t_len.saturating_sub(1)).rev() {
            let next = &b.row(t + 1) * &beta.row(t + 1);
            let mut v = self.trans.dot(&next);
            if c[t + 1] > 0.0 {
                v /= c[t + 1];
            }
            beta.row_mut(t).assign(&v);
        }
        let log_lik = c.iter().map(|v| v.ln()).sum::<f64>() + shift.iter().sum::<f64>();
        Passes {
            b,
            alpha,
            beta,
            c,
            log_lik,
        }
    }

    pub fn log_likelihood(&self, x: ArrayView2<f64>) -> Result<f64> {
        Ok(self.forward_backward(&self.log_emissions(x)?).log_lik)
    }

    /// Posterior state probabilities, samples × states; rows sum to 1.
    pub fn posteriors(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let p = self.forward_backward(&self.log_emissions(x)?);
        Ok(p.gamma())
    }

    /// Most probable state path; ties go to the lower state index.
    pub fn viterbi(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let log_b = self.log_emissions(x)?;
        let (t_len, k) = log_b.dim();
        let log_a = self.trans.mapv(f64::ln);
        let mut delta: Vec<f64> = (0..k).map(|j| self.init[j].ln() + log_b[[0, j]]).collect();
        let mut back = vec![vec![0usize; k]; t_len];
        for t in 1..t_len {
            let mut next = vec![f64::NEG_INFINITY; k];
            for j in 0..k {
                let mut best = (0, f64::NEG_INFINITY);
                for i in 0..k {
                    let v = delta[i] + log_a[[i, j]];
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                back[t][j] = best.0;
                next[j] = best.1 + log_b[[t, j]];
            }
            delta = next;
        }
        let mut s = 0;
        for j in 1..k {
            if delta[j] > delta[s] {
                s = j;
            }
        }
        let mut path = vec![0; t_len];
        path[t_len - 1] = s;
        for t in (1..t_len).rev() {
            s = back[t][s];
            path[t - 1] = s;
        }
        Ok(path)
    }

    /// Samples a state path and observations; used by tests and demos.
    pub fn sample<R: rand::Rng>(&self, n: usize, rng: &mut R) -> Result<(Vec<usize>, Array2<f64>)> {
        use rand_distr::{Distribution, StandardNormal};
        let (k, d) = self.means.dim();
        let draw = |p: ndarray::ArrayView1<f64>, rng: &mut R| {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            for i in 0..k {
                cum += p[i];
                if u < cum {
                    return i;
                }
            }
            k - 1
        };
        let chols: Vec<DMatrix<f64>> = self
            .covs
            .iter()
            .map(|c| {
                DMatrix::from_fn(d, d, |i, j| c[[i, j]])
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::Numerical("covariance not positive definite".into()))
            })
            .collect::<Result<_>>()?;
        let mut states = Vec::with_capacity(n);
        let mut x = Array2::zeros((n, d));
        let mut s = draw(self.init.view(), rng);
        for t in 0..n {
            if t > 0 {
                s = draw(self.trans.row(s), rng);
            }
            states.push(s);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for i in 0..d {
                let mut v = self.means[[s, i]];
                for j in 0..=i {
                    v += chols[s][(i, j)] * z[j];
                }
                x[[t, i]] = v;
            }
        }
        Ok((states, x))
    }
}

struct Passes {
    b: Array2<f64>,
    alpha: Array2<f64>,
    beta: Array2<f64>,
    c: Vec<f64>,
    log_lik: f64,
}

impl Passes {
    fn gamma(&self) -> Array2<f64> {
        let mut g = &self.alpha * &self.beta;
        for mut row in g.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmFit {
    pub model: HmmModel,
    /// Log-likelihood at every Baum-Welch iteration of the winning restart,
    /// evaluated before that iteration's update.
    pub history: Vec<f64>,
    /// Final log-likelihood of each restart.
    pub restart_log_liks: Vec<f64>,
    pub converged: bool,
}

fn weighted_gaussian(x: ArrayView2<f64>, w: ndarray::ArrayView1<f64>) -> Option<(Array1<f64>, Array2<f64>)> {
    let total = w.sum();
    if !(total > 1e-10) {
        return None;
    }
    let mean = w.dot(&x) / total;
    let centred = &x - &mean;
    let weighted = &centred * &w.insert_axis(Axis(1));
    let cov = weighted.t().dot(&centred) / total;
    Some((mean, cov))
}

fn initial_model(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<HmmModel> {
    let d = x.ncols();
    let km = kmeans(x, &KMeansConfig::new(k, seed))?;
    let (_, global) = weighted_gaussian(x, Array1::ones(x.nrows()).view()).expect("non-empty series");
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let w: Array1<f64> = km.assignment.iter().map(|&a| if a == j { 1.0 } else { 0.0 }).collect();
        let cov = match weighted_gaussian(x, w.view()) {
            Some((_, c)) if w.sum() > d as f64 => c,
            _ => global.clone(),
        };
        covs.push(cov);
    }
    let stay = if k == 1 { 1.0 } else { 0.9 };
    let trans = Array2::from_shape_fn((k, k), |(i, j)| if i == j { stay } else { (1.0 - stay) / (k - 1) as f64 });
    HmmModel::new(km.centroids, covs, trans, Array1::from_elem(k, 1.0 / k as f64))
}

fn em_step(model: &HmmModel, x: ArrayView2<f64>) -> Result<(HmmModel, f64)> {
    let p = model.forward_backward(&model.log_emissions(x)?);
    if !p.log_lik.is_finite() {
        return Err(Error::Numerical("HMM log-likelihood is not finite".into()));
    }
    let gamma = p.gamma();
    let (t_len, k) = gamma.dim();
    let mut xi = Array2::<f64>::zeros((k, k));
    for t in 0..t_len - 1 {
        if p.c[t + 1] <= 0.0 {
            continue;
        }
        let next = &p.b.row(t + 1) * &p.beta.row(t + 1) / p.c[t + 1];
        for i in 0..k {
            let a = p.alpha[[t, i]];
            if a == 0.0 {
                continue;
            }
            for j in 0..k {
                xi[[i, j]] += a * model.trans[[i, j]] * next[j];
            }
        }
    }
    let mut trans = model.trans.clone();
    for i in 0..k {
        let s = xi.row(i).sum();
        if s > 0.0 {
            trans.row_mut(i).assign(&(&xi.row(i) / s));
        }
    }
    let init = gamma.row(0).to_owned() / gamma.row(0).sum();
    let mut means = model.means.clone();
    let mut covs = model.covs.clone();
    for j in 0..k {
        if let Some((m, c)) = weighted_gaussian(x, gamma.column(j)) {
            means.row_mut(j).assign(&m);
            covs[j] = c;
        }
    }
    Ok((HmmModel::new(means, covs, trans, init)?, p.log_lik))
}

/// Fits a Gaussian HMM to `series` (samples × dims) by Baum-Welch from
/// k-means starts, keeping the restart with the highest likelihood.
pub fn fit_hmm(series: ArrayView2<f64>, cfg: &HmmConfig) -> Result<HmmFit> {
    let k = cfg.n_states;
    if k == 0 {
        return Err(Error::invalid("at least one state is required"));
    }
    if series.nrows() < 10 * k {
        return Err(Error::invalid(format!(
            "{} samples is fewer than 10 per state for {k} states",
            series.nrows()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let mut best: Option<HmmFit> = None;
    let mut lls = Vec::new();
    for r in 0..cfg.restarts.max(1) {
        let mut model = initial_model(series, k, cfg.seed.wrapping_add(r as u64))?;
        let mut history = Vec::new();
        let mut converged = false;
        for _ in 0..cfg.max_iter {
            let (next, ll) = em_step(&model, series)?;
            if let Some(&prev) = history.last() {
                let prev: f64 = prev;
                if (ll - prev).abs() <= cfg.tol * prev.abs() {
                    history.push(ll);
                    converged = true;
                    break;
                }
            }
            history.push(ll);
            model = next;
        }
        let final_ll = *history.last().expect("max_iter ≥ 1");
        lls.push(final_ll);
        if best.as_ref().map_or(true, |b| final_ll > *b.history.last().unwrap()) {
            best = Some(HmmFit {
                model,
                history,
                restart_log_liks: Vec::new(),
                converged,
            });
        }
    }
    let mut fit = best.ok_or_else(|| Error::invalid("max_iter must be at least 1"))?;
    fit.restart_log_liks = lls;
    Ok(fit)
}

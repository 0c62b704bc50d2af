use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of 2-D parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let v = Array2::from_shape_simple_fn(shape, || dist.sample(rng));
        self.add(name, v)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: (usize, usize), value: f64) -> ParamId {
        self.add(name, Array2::from_elem(shape, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn to_f32_blob(&self) -> Vec<f32> {
        self.values
            .iter()
            .flat_map(|v| v.iter().map(|&x| x as f32))
            .collect()
    }

    /// Overwrites values from a flat blob laid out as [`ParamStore::to_f32_blob`].
    pub fn load_f32_blob(&mut self, blob: &[f32]) -> Result<()> {
        if blob.len() != self.n_scalars() {
            return Err(Error::shape(format!(
                "parameter blob has {} values, model needs {}",
                blob.len(),
                self.n_scalars()
            )));
        }
        let mut it = blob.iter();
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = f64::from(*it.next().unwrap());
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| v.dim()))
            .collect()
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` where a parameter was unused.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Adaptive-moment optimiser with optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<_> = store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let scale = match self.clip {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut store.values[i]);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn blob_round_trip() {
        let mut s = ParamStore::new();
        s.add("a", array![[1.5, -2.0]]);
        s.add("b", array![[0.25], [3.0]]);
        let blob = s.to_f32_blob();
        let mut t = s.clone();
        t.get_mut(ParamId(0)).fill(0.0);
        t.load_f32_blob(&blob).unwrap();
        assert_eq!(t, s);
        assert!(t.load_f32_blob(&blob[1..]).is_err());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&s, 0.1);
        opt.clip = None;
        for _ in 0..500 {
            let g = s.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut s, &Gradients { grads: vec![Some(g)] });
        }
        assert!(s.get(id).iter().all(|x| x.abs() < 1e-2));
    }
}

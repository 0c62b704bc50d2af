use ndarray::{Array1, Array2, ArrayView2};

use super::spec_text::{KvReader, KvWriter};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};

/// Univariate linear autoregression of order K on every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArSpec {
    pub order: usize,
    pub n_channels: usize,
}

impl ArSpec {
    pub fn new(order: usize, n_channels: usize) -> Self {
        Self { order, n_channels }
    }

    pub fn to_text(&self) -> String {
        KvWriter::new("ar")
            .put("order", self.order)
            .put("n_channels", self.n_channels)
            .finish()
    }

    pub(crate) fn from_kv(kv: &KvReader) -> Result<Self> {
        Ok(Self {
            order: kv.get("order")?,
            n_channels: kv.get("n_channels")?,
        })
    }
}

impl Default for ArSpec {
    fn default() -> Self {
        Self::new(255, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub spec: ArSpec,
    pub params: ParamStore,
    /// `C × K`; column k multiplies the sample k + 1 steps back.
    coef: ParamId,
    /// `C × 1` intercepts.
    bias: ParamId,
    /// `1 × C` standard deviation of the generation noise, 1 until fitted.
    noise: ParamId,
}

impl ArModel {
    /// Zero coefficients, unit generation noise.
    pub fn new(spec: ArSpec) -> Result<Self> {
        if spec.order == 0 || spec.n_channels == 0 {
            return Err(Error::invalid("AR order and channel count must be at least 1"));
        }
        let mut params = ParamStore::new();
        let coef = params.add("ar.coef", Array2::zeros((spec.n_channels, spec.order)));
        let bias = params.add("ar.bias", Array2::zeros((spec.n_channels, 1)));
        let noise = params.add("ar.noise_std", Array2::ones((1, spec.n_channels)));
        Ok(Self {
            spec,
            params,
            coef,
            bias,
            noise,
        })
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        self.params.get(self.coef)
    }

    pub fn set_coefficients(&mut self, coef: Array2<f64>) -> Result<()> {
        if coef.dim() != (self.spec.n_channels, self.spec.order) {
            return Err(Error::shape("coefficient matrix must be channels × order"));
        }
        *self.params.get_mut(self.coef) = coef;
        Ok(())
    }

    pub fn intercepts(&self) -> Array1<f64> {
        self.params.get(self.bias).column(0).to_owned()
    }

    pub fn noise_std(&self) -> Array1<f64> {
        self.params.get(self.noise).row(0).to_owned()
    }

    pub fn set_noise_std(&mut self, std: &[f64]) -> Result<()> {
        if std.len() != self.spec.n_channels || std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("one non-negative noise level per channel"));
        }
        self.params
            .get_mut(self.noise)
            .row_mut(0)
            .assign(&Array1::from(std.to_vec()));
        Ok(())
    }

    /// Next value of every channel from a `C × ≥K` context whose last column is the latest sample.
    pub fn predict(&self, context: ArrayView2<f64>) -> Result<Array1<f64>> {
        let k = self.spec.order;
        if context.nrows() != self.spec.n_channels {
            return Err(Error::shape("context must have one row per channel"));
        }
        if context.ncols() < k {
            return Err(Error::invalid(format!(
                "context of {} samples is shorter than the order {k}",
                context.ncols()
            )));
        }
        let coef = self.coefficients();
        let bias = self.params.get(self.bias);
        let last = context.ncols() - 1;
        Ok(Array1::from_shape_fn(self.spec.n_channels, |c| {
            let mut y = bias[[c, 0]];
            for j in 0..k {
                y += coef[[c, j]] * context[[c, last - j]];
            }
            y
        }))
    }

    /// Mean squared one-step error over every sample of each `C × T` segment that has K predecessors.
    pub fn loss(&self, g: &mut Graph, segments: &[Array2<f64>]) -> Result<Var> {
        let (x, target, chan) = self.design(segments)?;
        let n = target.len();
        let coef = g.param(self.coef);
        let bias = g.param(self.bias);
        let xin = g.input(x);
        let rows = g.gather_all(coef, &chan);
        let prod = g.mul(xin, rows);
        let ones = g.input(Array2::ones((self.spec.order, 1)));
        let lin = g.matmul(prod, ones);
        let b = g.gather_all(bias, &chan);
        let pred = g.add(lin, b);
        let target = Array2::from_shape_vec((n, 1), target).unwrap();
        Ok(g.mse(pred, target, vec![1.0; n], n as f64))
    }

    /// Lag matrix, targets and channel of every row.
    fn design(&self, segments: &[Array2<f64>]) -> Result<(Array2<f64>, Vec<f64>, Vec<usize>)> {
        let k = self.spec.order;
        let mut rows = Vec::new();
        let mut target = Vec::new();
        let mut chan = Vec::new();
        for seg in segments {
            if seg.nrows() != self.spec.n_channels {
                return Err(Error::shape("segment channel count differs from the model"));
            }
            if seg.ncols() <= k {
                return Err(Error::invalid("segment shorter than the order plus one"));
            }
            for c in 0..seg.nrows() {
                for t in k..seg.ncols() {
                    rows.extend((0..k).map(|j| seg[[c, t - 1 - j]]));
                    target.push(seg[[c, t]]);
                    chan.push(c);
                }
            }
        }
        let x = Array2::from_shape_vec((target.len(), k), rows).unwrap();
        Ok((x, target, chan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_coefficients_predict_zero() {
        let m = ArModel::new(ArSpec::new(3, 2)).unwrap();
        let y = m.predict(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].view()).unwrap();
        assert_eq!(y, array![0.0, 0.0]);
    }

    #[test]
    fn short_context_is_an_error() {
        let m = ArModel::new(ArSpec::new(3, 1)).unwrap();
        assert!(m.predict(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn lag_convention() {
        let mut m = ArModel::new(ArSpec::new(2, 1)).unwrap();
        m.set_coefficients(array![[0.5, -0.25]]).unwrap();
        // 0.5 * x[t-1] - 0.25 * x[t-2]
        let y = m.predict(array![[9.0, 4.0, 2.0]].view()).unwrap();
        assert_eq!(y[0], 0.5 * 2.0 - 0.25 * 4.0);
    }

    #[test]
    fn loss_matches_direct_residuals() {
        let mut m = ArModel::new(ArSpec::new(2, 2)).unwrap();
        m.set_coefficients(array![[0.3, 0.1], [-0.2, 0.4]]).unwrap();
        let seg = array![[0.1, 0.2, -0.3, 0.4, 0.0], [1.0, -1.0, 0.5, 0.25, -0.5]];
        let mut g = Graph::new(&m.params);
        let l = m.loss(&mut g, &[seg.clone()]).unwrap();
        let mut sse = 0.0;
        for t in 2..5 {
            let p = m.predict(seg.slice(ndarray::s![.., ..t])).unwrap();
            for c in 0..2 {
                sse += (p[c] - seg[[c, t]]).powi(2);
            }
        }
        assert!((g.scalar(l) - sse / 6.0).abs() < 1e-14);
    }

    #[test]
    fn default_order() {
        assert_eq!(ArSpec::default().order, 255);
    }
}

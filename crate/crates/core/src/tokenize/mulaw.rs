use crate::error::{Error, Result};

/// Mu-law compander followed by uniform binning of the companded value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuLawCodec {
    pub mu: f64,
    pub n_bins: usize,
}

impl Default for MuLawCodec {
    fn default() -> Self {
        Self {
            mu: 255.0,
            n_bins: 256,
        }
    }
}

/// f(x) = sign(x) ln(1 + μ|x|) / ln(1 + μ), defined for |x| ≤ 1.
pub fn mu_law(x: f64, mu: f64) -> Result<f64> {
    if !(x.abs() <= 1.0) {
        return Err(Error::OutOfRange(format!("mu-law input {x} outside [-1, 1]")));
    }
    Ok(compress(x, mu))
}

/// g(y) = sign(y) ((1 + μ)^|y| − 1) / μ, the inverse of [`mu_law`].
pub fn mu_law_inverse(y: f64, mu: f64) -> Result<f64> {
    if !(y.abs() <= 1.0) {
        return Err(Error::OutOfRange(format!("mu-law code {y} outside [-1, 1]")));
    }
    Ok(expand(y, mu))
}

#[inline]
fn compress(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

#[inline]
fn expand(y: f64, mu: f64) -> f64 {
    y.signum() * ((y.abs() * mu.ln_1p()).exp_m1()) / mu
}

impl MuLawCodec {
    pub fn new(mu: f64, n_bins: usize) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be positive, got {mu}")));
        }
        if n_bins < 2 || n_bins > u32::MAX as usize {
            return Err(Error::invalid(format!("n_bins must be ≥ 2, got {n_bins}")));
        }
        Ok(Self { mu, n_bins })
    }

    pub fn token(&self, x: f64) -> Result<u32> {
        let y = mu_law(x, self.mu)?;
        Ok(self.bin_of_companded(y))
    }

    /// Bin of an already companded value (clamped into the vocabulary).
    pub(crate) fn bin_of_companded(&self, y: f64) -> u32 {
        let q = ((y + 1.0) / 2.0 * self.n_bins as f64).floor();
        q.clamp(0.0, (self.n_bins - 1) as f64) as u32
    }

    /// Companded value at the centre of bin `q`.
    pub fn bin_centre(&self, q: u32) -> f64 {
        (q as f64 + 0.5) / self.n_bins as f64 * 2.0 - 1.0
    }

    /// Bin width in the companded domain.
    pub fn companded_width(&self) -> f64 {
        2.0 / self.n_bins as f64
    }

    /// Inverse companding of the bin centre.
    pub fn value(&self, q: u32) -> Result<f64> {
        if q as usize >= self.n_bins {
            return Err(Error::OutOfRange(format!("token {q} outside vocabulary {}", self.n_bins)));
        }
        Ok(expand(self.bin_centre(q), self.mu))
    }

    /// Lookup table of detokenised values, one per bin.
    pub fn values(&self) -> Vec<f64> {
        (0..self.n_bins as u32)
            .map(|q| expand(self.bin_centre(q), self.mu))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fixed_points() {
        assert_eq!(mu_law(0.0, 255.0).unwrap(), 0.0);
        assert!((mu_law(1.0, 255.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((mu_law(-1.0, 255.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_high_precision_values() {
        // reference values evaluated with 40-digit arithmetic
        assert!((mu_law(0.5, 255.0).unwrap() - 0.875_703_068_649_234_8).abs() < 1e-12);
        assert!((mu_law(0.1, 255.0).unwrap() - 0.590_990_056_820_399_9).abs() < 1e-12);
        assert!((mu_law(-0.5, 255.0).unwrap() + 0.875_703_068_649_234_8).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_an_error() {
        assert!(mu_law(1.0001, 255.0).is_err());
        assert!(mu_law(f64::NAN, 255.0).is_err());
        assert!(MuLawCodec::default().token(-1.5).is_err());
    }

    #[test]
    fn default_codec() {
        let c = MuLawCodec::default();
        assert_eq!(c.mu, 255.0);
        assert_eq!(c.n_bins, 256);
        assert_eq!(c.token(0.0).unwrap(), 128);
        assert_eq!(c.token(1.0).unwrap(), 255);
        assert_eq!(c.token(-1.0).unwrap(), 0);
    }

    #[test]
    fn round_trip_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let x: f64 = rng.gen_range(-1.0..=1.0);
            let back = mu_law_inverse(mu_law(x, 255.0).unwrap(), 255.0).unwrap();
            assert!((back - x).abs() < 1e-9);
        }
    }

    #[test]
    fn bins_are_narrower_near_zero() {
        let c = MuLawCodec::default();
        let v = c.values();
        let near_zero = v[129] - v[128];
        let near_one = v[255] - v[254];
        assert!(near_zero < near_one);
        assert!(v.iter().all(|x| x.abs() < 1.0));
    }
}

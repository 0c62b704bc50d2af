use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Buckets × steps into `sep, z_1 .. z_B` repeated for every step.
pub fn flatten(tokens: ArrayView2<u32>, sep: u32) -> Vec<u32> {
    let (b, t) = tokens.dim();
    let mut out = Vec::with_capacity((b + 1) * t);
    for col in tokens.columns() {
        out.push(sep);
        out.extend(col.iter().copied());
    }
    out
}

/// Inverse of [`flatten`]. Every block must start with `sep`.
pub fn unflatten(seq: &[u32], n_buckets: usize, sep: u32) -> Result<Array2<u32>> {
    let block = n_buckets + 1;
    if seq.len() % block != 0 {
        return Err(Error::shape(format!(
            "sequence of length {} is not a multiple of {block}",
            seq.len()
        )));
    }
    let t = seq.len() / block;
    let mut out = Array2::zeros((n_buckets, t));
    for (step, chunk) in seq.chunks_exact(block).enumerate() {
        if chunk[0] != sep {
            return Err(Error::invalid(format!("missing separator at step {step}")));
        }
        for (b, &z) in chunk[1..].iter().enumerate() {
            out[[b, step]] = z;
        }
    }
    Ok(out)
}

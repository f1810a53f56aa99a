//! Sinusoid index encodings.
//!
//! The usual sinusoid positional encoding with the sequence position replaced
//! by a data-derived index: the keypoint type at the embedding, the frame
//! index after the first grouped pool.

use crate::error::{Error, Result};

/// Encoding vector for one index: channel pair `2k, 2k+1` holds
/// `(sin, cos)` of `index / 10000^(2k / dim)`.
pub fn index_encoding(index: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "index encoding needs a positive even dimension, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let rate = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let angle = index as f64 / rate;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(out)
}

/// Stacked encodings for a slice of indices, as an `indices.len() x dim`
/// row-major matrix.
pub fn encoding_matrix(indices: &[usize], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &idx in indices {
        out.extend(index_encoding(idx, dim)?);
    }
    Ok(out)
}

//! Zero-mean Gaussian-process draws from a composed kernel.
//!
//! Draws are `L z` where `L` is the Cholesky factor of the Gram matrix (plus
//! the smallest diagonal jitter that makes it factorize) and `z` is a vector of
//! standard normals generated with the ziggurat method of `rand_distr`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::kernel_bank::{evaluate_kernel, unit_grid, KernelError, KernelExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("Cholesky factorization failed even with jitter {max_jitter:e}")]
    FactorizationFailed { max_jitter: f64 },
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("series length must be at least 2, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Jitter multipliers tried in order; each is scaled by the mean diagonal.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// One latent function realization.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    pub values: Vec<f64>,
    pub kernel: KernelExpr,
    pub jitter_used: f64,
}

/// Plain Cholesky of a symmetric matrix with `jitter` added to the diagonal.
/// Returns `None` on a non-positive or non-finite pivot.
fn cholesky(k: &Array2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = k.nrows();
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let (above, below) = l.split_at_mut((j + 1) * n);
        let row_j = &mut above[j * n..];
        let d = k[[j, j]] + jitter - dot(&row_j[..j], &row_j[..j]);
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let pivot = d.sqrt();
        row_j[j] = pivot;
        let row_j = &row_j[..j];
        for (offset, row_i) in below.chunks_exact_mut(n).enumerate() {
            let i = j + 1 + offset;
            row_i[j] = (k[[i, j]] - dot(&row_i[..j], row_j)) / pivot;
        }
    }
    Array2::from_shape_vec((n, n), l).ok()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular factor of `k + jitter I` for the smallest jitter on
/// [`JITTER_LADDER`] that succeeds.
///
/// Ladder steps are multiplied by the mean diagonal of `k`, or by one when
/// that mean is not positive (an all-zero matrix still factorizes).
pub fn cholesky_with_jitter(k: &Array2<f64>) -> Result<(Array2<f64>, f64), SampleError> {
    let (rows, cols) = k.dim();
    if rows != cols {
        return Err(SampleError::NotSquare(rows, cols));
    }
    let mean_diag = if rows == 0 {
        1.0
    } else {
        k.diag().sum() / rows as f64
    };
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    for step in JITTER_LADDER {
        let jitter = step * scale;
        if let Some(l) = cholesky(k, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(SampleError::FactorizationFailed {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
    })
}

/// `l z` for lower-triangular `l`.
pub fn correlate(l: &Array2<f64>, z: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    (0..n)
        .map(|i| {
            let row = l.row(i);
            (0..=i).map(|p| row[p] * z[p]).sum()
        })
        .collect()
}

/// Draws one realization of the GP with covariance `expr` on the unit grid of
/// `len` points.
pub fn sample_latent<R: Rng + ?Sized>(
    expr: &KernelExpr,
    len: usize,
    rng: &mut R,
) -> Result<LatentDraw, SampleError> {
    if len < 2 {
        return Err(SampleError::TooShort(len));
    }
    let gram = evaluate_kernel(expr, &unit_grid(len))?;
    let (l, jitter_used) = cholesky_with_jitter(&gram)?;
    let z: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Ok(LatentDraw {
        values: correlate(&l, &z),
        kernel: expr.clone(),
        jitter_used,
    })
}

//! Kernel evaluation, Gram matrices and the PSD eigendecomposition shared by
//! the featurizers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Default relative tolerance below which eigenvalues are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 bandwidth^2))`
    Gaussian { bandwidth: f64 },
    /// `<x, y>`
    Linear,
    /// `(<x, y> + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let spec = KernelSpec::Gaussian { bandwidth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn polynomial(degree: u32, offset: f64) -> Result<Self> {
        let spec = KernelSpec::Polynomial { degree, offset };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(Error::InvalidParameter(format!(
                    "gaussian bandwidth must be positive and finite, got {bandwidth}"
                )))
            }
            KernelSpec::Polynomial { degree, .. } if degree < 1 => Err(Error::InvalidParameter(
                "polynomial degree must be at least 1".into(),
            )),
            KernelSpec::Polynomial { offset, .. } if !(offset >= 0.0 && offset.is_finite()) => {
                Err(Error::InvalidParameter(format!(
                    "polynomial offset must be nonnegative, got {offset}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, KernelSpec::Gaussian { .. })
    }

    /// Evaluates the kernel on two equal-length slices without checking lengths.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => dot(x, y),
            KernelSpec::Polynomial { degree, offset } => (dot(x, y) + offset).powi(degree as i32),
        }
    }

    /// The kernel value given `<x, y>`, `|x|^2` and `|y|^2`. All three families
    /// are functions of these, which lets callers evaluate many kernels off one
    /// matrix product.
    #[inline]
    pub fn from_inner(&self, inner: f64, x_sq: f64, y_sq: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let sq = (x_sq + y_sq - 2.0 * inner).max(0.0);
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => inner,
            KernelSpec::Polynomial { degree, offset } => (inner + offset).powi(degree as i32),
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims("kernel argument length", x.len(), y.len())?;
    Ok(spec.eval_unchecked(x, y))
}

/// Gram matrix with entry `(i, j) = k(X_i, Y_j)`; rows of `x` and `y` are points.
///
/// Rows are computed in parallel, but every entry is a single sequential
/// reduction so the result does not depend on the thread count.
pub fn gram_matrix(spec: &KernelSpec, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims("gram column dimension", x.ncols(), y.ncols())?;
    spec.validate()?;
    let xt = x.transpose();
    let yt = y.transpose();
    let (n, m) = (x.nrows(), y.nrows());
    let mut flat = vec![0.0; n * m];
    flat.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let xi = xt.column(i);
        let xi = xi.as_slice();
        for (j, out) in row.iter_mut().enumerate() {
            *out = spec.eval_unchecked(xi, yt.column(j).as_slice());
        }
    });
    Ok(DMatrix::from_row_slice(n, m, &flat))
}

/// Symmetric Gram matrix of `x` against itself; the upper triangle is mirrored
/// so the result is exactly symmetric.
pub fn gram_symmetric(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let xt = x.transpose();
    let n = x.nrows();
    let mut flat = vec![0.0; n * n];
    flat.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let xi = xt.column(i);
        let xi = xi.as_slice();
        for (j, out) in row.iter_mut().enumerate().skip(i) {
            *out = spec.eval_unchecked(xi, xt.column(j).as_slice());
        }
    });
    let mut k = DMatrix::from_row_slice(n, n, &flat);
    for i in 0..n {
        for j in 0..i {
            k[(i, j)] = k[(j, i)];
        }
    }
    Ok(k)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenDecomposition {
    /// Retained eigenvalues, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// One orthonormal column per retained eigenvalue.
    pub eigenvectors: DMatrix<f64>,
    pub rank: usize,
    /// Number of eigenvalues dropped by the rank tolerance.
    pub truncated: usize,
}

impl EigenDecomposition {
    /// `V diag(d) V^T` over the retained part.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        scaled * self.eigenvectors.transpose()
    }
}

pub fn max_asymmetry(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric PSD matrix.
///
/// Eigenvalues are sorted nonincreasing, negative round-off is clamped to zero,
/// and anything at or below `rank_tol * largest` is dropped together with its
/// eigenvector.
pub fn eigendecompose_psd(k: &DMatrix<f64>, rank_tol: f64) -> Result<EigenDecomposition> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if !(rank_tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("rank_tol must be nonnegative, got {rank_tol}")));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scale = k.amax().max(1.0);
    let asym = max_asymmetry(k);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let n = k.nrows();
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: Vec::new(),
            eigenvectors: DMatrix::zeros(0, 0),
            rank: 0,
            truncated: 0,
        });
    }
    // Average the two triangles so the solver sees an exactly symmetric input.
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let largest = eig.eigenvalues[order[0]].max(0.0);
    let cutoff = rank_tol * largest;
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| largest > 0.0 && eig.eigenvalues[i].max(0.0) > cutoff)
        .collect();

    let eigenvalues: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut eigenvectors = DMatrix::zeros(n, kept.len());
    for (c, &i) in kept.iter().enumerate() {
        eigenvectors.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok(EigenDecomposition {
        rank: kept.len(),
        truncated: n - kept.len(),
        eigenvalues,
        eigenvectors,
    })
}

/// Median pairwise Euclidean distance among the rows of `x`; used as the
/// reference scale for Gaussian bandwidth grids.
pub fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let xt = x.transpose();
    let n = x.nrows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = xt
                .column(i)
                .iter()
                .zip(xt.column(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    }
}

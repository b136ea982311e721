//! Canonical correlation analysis between two views and the canonical norm
//! used to penalize weakly correlated directions.
//!
//! CCA is solved by whitening each view's (ridge-regularized) covariance and
//! taking the SVD of the whitened cross-covariance. Views are centered with
//! means over every fit row; the means are stored and reapplied on projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

pub const DEFAULT_REG_EPS: f64 = 1e-4;
pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-6;

/// How far a correlation may exceed 1 before the fit is rejected.
const CORRELATION_OVERSHOOT: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcaModel {
    pub mean1: DVector<f64>,
    pub mean2: DVector<f64>,
    /// `d1 x K`: raw view-1 features (centered) to canonical coordinates.
    pub basis1: DMatrix<f64>,
    /// `d2 x K`.
    pub basis2: DMatrix<f64>,
    /// Canonical correlations, nonincreasing, clamped to `[0, 1]`.
    pub correlations: Vec<f64>,
    pub reg_eps: f64,
}

impl CcaModel {
    pub fn num_directions(&self) -> usize {
        self.correlations.len()
    }
}

pub(crate) fn column_means(z: &DMatrix<f64>) -> DVector<f64> {
    let n = z.nrows() as f64;
    DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn centered(z: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = z.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// `C^{-1/2}` for a symmetric positive definite covariance.
fn inverse_sqrt(cov: DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov);
    let largest = eig.eigenvalues.max();
    let smallest = eig.eigenvalues.min();
    if !(largest > 0.0) || smallest <= 1e-13 * largest {
        return Err(Error::Singular(format!(
            "{which} covariance is rank deficient (eigenvalues in [{smallest:e}, {largest:e}]); increase reg_eps"
        )));
    }
    let d = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

pub fn fit_cca(z1: &DMatrix<f64>, z2: &DMatrix<f64>, reg_eps: f64) -> Result<CcaModel> {
    check_dims("cca row count", z1.nrows(), z2.nrows())?;
    if z1.nrows() < 2 {
        return Err(Error::InsufficientData("cca needs at least two rows".into()));
    }
    if !(reg_eps >= 0.0 && reg_eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("reg_eps must be nonnegative, got {reg_eps}")));
    }
    if z1.ncols() == 0 || z2.ncols() == 0 {
        return Err(Error::InvalidParameter("cca views need at least one column".into()));
    }
    if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = z1.nrows() as f64;
    let mean1 = column_means(z1);
    let mean2 = column_means(z2);
    let c1 = centered(z1, &mean1);
    let c2 = centered(z2, &mean2);

    let mut cov11 = c1.tr_mul(&c1) / n;
    let mut cov22 = c2.tr_mul(&c2) / n;
    let cov12 = c1.tr_mul(&c2) / n;
    for i in 0..cov11.nrows() {
        cov11[(i, i)] += reg_eps;
    }
    for i in 0..cov22.nrows() {
        cov22[(i, i)] += reg_eps;
    }
    let w1 = inverse_sqrt(cov11, "view 1")?;
    let w2 = inverse_sqrt(cov22, "view 2")?;
    let t = &w1 * cov12 * &w2;

    let svd = SVD::new(t, true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd did not return U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("svd did not return V^T".into()))?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut correlations = Vec::with_capacity(k);
    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_sorted = DMatrix::zeros(v_t.ncols(), k);
    for (c, &i) in order.iter().enumerate() {
        let s = svd.singular_values[i];
        if !s.is_finite() {
            return Err(Error::NonFinite);
        }
        if s > 1.0 + CORRELATION_OVERSHOOT {
            return Err(Error::Numerical(format!(
                "canonical correlation {s} exceeds 1; reg_eps is too small for these views"
            )));
        }
        correlations.push(s.clamp(0.0, 1.0));
        u_sorted.set_column(c, &u.column(i));
        v_sorted.set_column(c, &v_t.row(i).transpose());
    }

    Ok(CcaModel {
        basis1: w1 * u_sorted,
        basis2: w2 * v_sorted,
        mean1,
        mean2,
        correlations,
        reg_eps,
    })
}

/// Canonical coordinates of view-1 rows.
pub fn project_view(model: &CcaModel, z1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims("view 1 dimension", model.basis1.nrows(), z1.ncols())?;
    Ok(centered(z1, &model.mean1) * &model.basis1)
}

/// Canonical coordinates of view-2 rows.
pub fn project_view2(model: &CcaModel, z2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims("view 2 dimension", model.basis2.nrows(), z2.ncols())?;
    Ok(centered(z2, &model.mean2) * &model.basis2)
}

/// Per-direction penalty `(1 - lambda_i) / max(lambda_i, floor)`.
///
/// Near-zero correlations are capped through the floor rather than dropped.
pub fn canonical_penalties(correlations: &[f64], lambda_floor: f64) -> Result<Vec<f64>> {
    if !(lambda_floor > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda_floor must be positive, got {lambda_floor}")));
    }
    Ok(correlations
        .iter()
        .map(|&l| (1.0 - l) / l.max(lambda_floor))
        .collect())
}

pub fn canonical_norm_sq(correlations: &[f64], w_bar: &[f64], lambda_floor: f64) -> Result<f64> {
    check_dims("canonical weight length", correlations.len(), w_bar.len())?;
    let pen = canonical_penalties(correlations, lambda_floor)?;
    Ok(pen.iter().zip(w_bar).map(|(p, w)| p * w * w).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn identical_views_perfectly_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(&mut rng, 200, 6);
        let m = fit_cca(&z, &z, 0.0).unwrap();
        assert_eq!(m.num_directions(), 6);
        for l in &m.correlations {
            assert!((l - 1.0).abs() < 1e-6, "{l}");
        }
    }

    #[test]
    fn scaled_column_is_perfectly_correlated() {
        let z1 = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let z2 = DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0]);
        let m = fit_cca(&z1, &z2, 0.0).unwrap();
        assert!((m.correlations[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_has_small_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = gaussian(&mut rng, 10_000, 5);
        let z2 = gaussian(&mut rng, 10_000, 5);
        let m = fit_cca(&z1, &z2, DEFAULT_REG_EPS).unwrap();
        assert!(m.correlations.iter().all(|&l| l < 0.1), "{:?}", m.correlations);
        assert!(m.correlations.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cca_errors() {
        let a = DMatrix::zeros(4, 2);
        let b = DMatrix::zeros(5, 2);
        assert!(matches!(fit_cca(&a, &b, 0.0), Err(Error::DimensionMismatch(_))));
        // duplicated column: singular covariance without regularization
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut z = gaussian(&mut rng, 50, 3);
        let c0 = z.column(0).clone_owned();
        z.set_column(2, &c0);
        assert!(matches!(fit_cca(&z, &z, 0.0), Err(Error::Singular(_))));
        assert!(fit_cca(&z, &z, 1e-3).is_ok());
        assert!(fit_cca(&z, &z, -1.0).is_err());
    }

    #[test]
    fn projection_whitens_and_diagonalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shared = gaussian(&mut rng, 500, 2);
        let z1 = DMatrix::from_fn(500, 4, |i, j| if j < 2 { shared[(i, j)] } else { 0.0 })
            + gaussian(&mut rng, 500, 4) * 0.5;
        let z2 = DMatrix::from_fn(500, 3, |i, j| if j < 2 { shared[(i, 1 - j)] } else { 0.0 })
            + gaussian(&mut rng, 500, 3) * 0.5;
        let m = fit_cca(&z1, &z2, 0.0).unwrap();
        let p1 = project_view(&m, &z1).unwrap();
        let p2 = project_view2(&m, &z2).unwrap();
        let n = 500.0;
        let cov1 = p1.tr_mul(&p1) / n;
        assert!((cov1 - DMatrix::identity(3, 3)).amax() < 1e-6);
        let cross = p1.tr_mul(&p2) / n;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { m.correlations[i] } else { 0.0 };
                assert!((cross[(i, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_row_projects_to_zero_for_centered_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian(&mut rng, 100, 3);
        let z = centered(&z, &column_means(&z));
        let z2 = &z * 2.0 + gaussian(&mut rng, 100, 3);
        let z2 = centered(&z2, &column_means(&z2));
        let m = fit_cca(&z, &z2, 0.0).unwrap();
        let p = project_view(&m, &DMatrix::zeros(1, 3)).unwrap();
        assert!(p.amax() < 1e-12);
        assert!(project_view(&m, &DMatrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn canonical_norm_examples() {
        assert_eq!(canonical_norm_sq(&[1.0, 1.0], &[3.0, -2.0], 1e-6).unwrap(), 0.0);
        assert_eq!(canonical_norm_sq(&[0.5], &[1.0], 1e-6).unwrap(), 1.0);
        let v = canonical_norm_sq(&[0.9, 0.1], &[1.0, 1.0], 1e-6).unwrap();
        assert!((v - (1.0 / 9.0 + 9.0)).abs() < 1e-12);
        assert!(canonical_norm_sq(&[0.5], &[1.0, 2.0], 1e-6).is_err());
        assert!(canonical_norm_sq(&[0.5], &[1.0], 0.0).is_err());
    }

    #[test]
    fn floor_caps_zero_correlation() {
        let p = canonical_penalties(&[0.0], 1e-6).unwrap();
        assert!(p[0].is_finite());
        assert!((p[0] - 1e6).abs() < 1e-6);
    }
}

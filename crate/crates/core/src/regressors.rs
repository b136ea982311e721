//! Supervised solvers: canonical-norm penalized regression, kernel ridge
//! regression, the randomized spectral baseline (SSSL_M) and co-regularized
//! least squares.
//!
//! Objective scaling differs on purpose. `fit_xnv` averages the squared loss
//! over the labeled rows; `fit_corls` uses plain sums. Optimal
//! hyperparameters for one are therefore not optimal for the other.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::cca::canonical_penalties;
use crate::error::{check_dims, Error, Result};
use crate::kernels::{gram_matrix, gram_symmetric, KernelSpec};
use crate::nystrom::{fit_nystrom_landmarks, NystromMap};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Mean squared error on the rows the model was fit to.
    pub train_mse: f64,
    /// Identifies the featurization the weights live in, when known.
    pub pipeline_id: Option<String>,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// `y_i = <w, z_i> + intercept`.
pub fn predict(model: &LinearModel, z: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dims("predict feature dimension", model.dim(), z.ncols())?;
    let w = DVector::from_column_slice(&model.weights);
    Ok((z * w).iter().map(|v| v + model.intercept).collect())
}

pub fn mean_squared_error(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_dims("prediction count", y.len(), pred.len())?;
    if y.is_empty() {
        return Err(Error::InsufficientData("mse of an empty set".into()));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64)
}

fn label_mean(y: &[f64], center: bool) -> f64 {
    if center && !y.is_empty() {
        y.iter().sum::<f64>() / y.len() as f64
    } else {
        0.0
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    solve_spd_strict(a, b).ok_or_else(|| Error::Singular(format!("{what}: system is not positive definite")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XnvParams {
    /// Ridge coefficient on `|w|^2`.
    pub gamma: f64,
    pub lambda_floor: f64,
    /// Multiplier on the canonical norm; 1 reproduces the unweighted objective.
    pub penalty_scale: f64,
    /// Center labels on the labeled set and store the mean as intercept.
    pub center_labels: bool,
}

impl XnvParams {
    pub fn new(gamma: f64) -> Self {
        XnvParams {
            gamma,
            lambda_floor: crate::cca::DEFAULT_LAMBDA_FLOOR,
            penalty_scale: 1.0,
            center_labels: true,
        }
    }
}

/// Exact minimizer of
/// `(1/l) sum (<w, zbar_i> - y_i)^2 + |w|_CCA^2 + gamma |w|^2`
/// through its normal equations.
pub fn fit_xnv(zbar: &DMatrix<f64>, y: &[f64], correlations: &[f64], params: &XnvParams) -> Result<LinearModel> {
    check_dims("label count", zbar.nrows(), y.len())?;
    check_dims("canonical dimension", correlations.len(), zbar.ncols())?;
    if y.is_empty() {
        return Err(Error::InsufficientData("xnv needs at least one labeled row".into()));
    }
    if !(params.gamma >= 0.0) || !(params.penalty_scale >= 0.0) {
        return Err(Error::InvalidParameter("gamma and penalty scale must be nonnegative".into()));
    }
    let penalties = canonical_penalties(correlations, params.lambda_floor)?;
    let ell = y.len() as f64;
    let mean = label_mean(y, params.center_labels);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));

    let mut h = zbar.tr_mul(zbar) / ell;
    for (i, p) in penalties.iter().enumerate() {
        h[(i, i)] += params.penalty_scale * p + params.gamma;
    }
    let rhs = zbar.tr_mul(&yc) / ell;
    let w = solve_spd(h, &rhs, "xnv normal equations")?;

    let mut model = LinearModel {
        weights: w.as_slice().to_vec(),
        intercept: mean,
        train_mse: 0.0,
        pipeline_id: None,
    };
    model.train_mse = mean_squared_error(&predict(&model, zbar)?, y)?;
    Ok(model)
}

/// Value of the objective minimized by [`fit_xnv`] at `(weights, intercept)`.
pub fn xnv_objective(
    zbar: &DMatrix<f64>,
    y: &[f64],
    correlations: &[f64],
    params: &XnvParams,
    weights: &[f64],
    intercept: f64,
) -> Result<f64> {
    let model = LinearModel {
        weights: weights.to_vec(),
        intercept,
        train_mse: 0.0,
        pipeline_id: None,
    };
    let data = mean_squared_error(&predict(&model, zbar)?, y)?;
    let canon = crate::cca::canonical_norm_sq(correlations, weights, params.lambda_floor)?;
    let ridge: f64 = weights.iter().map(|w| w * w).sum();
    Ok(data + params.penalty_scale * canon + params.gamma * ridge)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualModel {
    pub dual_weights: Vec<f64>,
    pub intercept: f64,
    /// Training rows and kernel, kept for evaluating new points.
    pub training: Option<(DMatrix<f64>, KernelSpec)>,
}

impl DualModel {
    /// Predictions from precomputed kernel values (rows: new points, columns:
    /// training rows).
    pub fn predict_kernel(&self, k_new_train: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dims("kernel columns", self.dual_weights.len(), k_new_train.ncols())?;
        let a = DVector::from_column_slice(&self.dual_weights);
        Ok((k_new_train * a).iter().map(|v| v + self.intercept).collect())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (rows, kernel) = self
            .training
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("dual model was fit without training rows".into()))?;
        self.predict_kernel(&gram_matrix(kernel, x, rows)?)
    }
}

/// `alpha = (K + gamma l I)^{-1} y`.
pub fn fit_krr(k: &DMatrix<f64>, y: &[f64], gamma: f64, center_labels: bool) -> Result<DualModel> {
    check_dims("krr kernel rows", y.len(), k.nrows())?;
    check_dims("krr kernel columns", y.len(), k.ncols())?;
    if y.is_empty() {
        return Err(Error::InsufficientData("krr needs at least one labeled row".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("krr gamma must be positive, got {gamma}")));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let asym = crate::kernels::max_asymmetry(k);
    let scale = k.amax().max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let min_eig = SymmetricEigen::new(k.clone()).eigenvalues.min();
    if min_eig < -1e-8 * scale {
        return Err(Error::NotPsd(min_eig));
    }
    let ell = y.len();
    let mean = label_mean(y, center_labels);
    let yc = DVector::from_iterator(ell, y.iter().map(|v| v - mean));
    let mut a = k.clone();
    for i in 0..ell {
        a[(i, i)] += gamma * ell as f64;
    }
    let alpha = solve_spd(a, &yc, "krr system")?;
    Ok(DualModel {
        dual_weights: alpha.as_slice().to_vec(),
        intercept: mean,
        training: None,
    })
}

/// [`fit_krr`] on raw rows, retaining them for prediction.
pub fn fit_krr_rows(x: &DMatrix<f64>, y: &[f64], kernel: KernelSpec, gamma: f64, center_labels: bool) -> Result<DualModel> {
    let k = gram_symmetric(&kernel, x)?;
    let mut model = fit_krr(&k, y, gamma, center_labels)?;
    model.training = Some((x.clone(), kernel));
    Ok(model)
}

/// Ordinary least squares on the first `s` columns of `features`, with an
/// intercept. The returned weights cover only those `s` columns.
pub fn fit_top_directions(features: &DMatrix<f64>, y: &[f64], s: usize) -> Result<LinearModel> {
    check_dims("label count", features.nrows(), y.len())?;
    if s == 0 || s > features.ncols() {
        return Err(Error::InvalidParameter(format!(
            "s = {s} must lie in 1..={} (retained rank)",
            features.ncols()
        )));
    }
    if y.is_empty() {
        return Err(Error::InsufficientData("least squares needs labeled rows".into()));
    }
    let top = features.columns(0, s).into_owned();
    let means = crate::cca::column_means(&top);
    let xc = crate::cca::centered(&top, &means);
    let ybar = label_mean(y, true);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ybar));
    let svd = xc.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE) * (y.len().max(s) as f64);
    let w = svd
        .solve(&yc, tol)
        .map_err(|e| Error::Numerical(format!("least squares: {e}")))?;
    check_finite(w.as_slice(), "least squares weights")?;
    let intercept = ybar - w.dot(&means);
    let mut model = LinearModel {
        weights: w.as_slice().to_vec(),
        intercept,
        train_mse: 0.0,
        pipeline_id: None,
    };
    model.train_mse = mean_squared_error(&predict(&model, &top)?, y)?;
    Ok(model)
}

/// SSSL_M: Nystrom map on `m` landmarks drawn from every row, then least
/// squares on the labeled rows using only the top-`s` eigen-directions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SsslModel {
    pub map: NystromMap,
    pub s: usize,
    pub model: LinearModel,
}

impl SsslModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let z = self.map.featurize(x)?;
        predict(&self.model, &z.columns(0, self.s).into_owned())
    }
}

pub fn fit_sssl_m(
    x_all: &DMatrix<f64>,
    labeled: &[usize],
    y: &[f64],
    kernel: KernelSpec,
    m: usize,
    s: usize,
    seed: u64,
) -> Result<SsslModel> {
    check_dims("labeled rows", labeled.len(), y.len())?;
    if s > m {
        return Err(Error::InvalidParameter(format!("s = {s} exceeds m = {m}")));
    }
    if m == 0 || m > x_all.nrows() {
        return Err(Error::InsufficientData(format!(
            "need {m} landmark rows, only {} available",
            x_all.nrows()
        )));
    }
    let mut rng = substream(seed, "sssl-landmarks", &[]);
    let rows: Vec<usize> = index::sample(&mut rng, x_all.nrows(), m).into_vec();
    let map = fit_nystrom_landmarks(x_all.select_rows(&rows), kernel, crate::kernels::DEFAULT_RANK_TOL)?;
    fit_sssl_with_map(map, &x_all.select_rows(labeled), y, s)
}

pub fn fit_sssl_with_map(map: NystromMap, x_labeled: &DMatrix<f64>, y: &[f64], s: usize) -> Result<SsslModel> {
    if s > map.rank() {
        return Err(Error::InvalidParameter(format!(
            "s = {s} exceeds retained rank {}",
            map.rank()
        )));
    }
    let z = map.featurize(x_labeled)?;
    let model = fit_top_directions(&z, y, s)?;
    Ok(SsslModel { map, s, model })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorlsParams {
    pub a1: f64,
    pub a2: f64,
    pub a_co: f64,
    /// Optional ridge on both weight vectors; 0 gives the unregularized objective.
    pub ridge: f64,
    pub center_labels: bool,
}

impl CorlsParams {
    pub fn new(a1: f64, a2: f64, a_co: f64) -> Self {
        CorlsParams {
            a1,
            a2,
            a_co,
            ridge: 0.0,
            center_labels: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("a1", self.a1), ("a2", self.a2), ("a_co", self.a_co), ("ridge", self.ridge)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorlsModel {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
    pub intercept: f64,
    /// True when the joint system needed diagonal jitter to factor.
    pub jittered: bool,
}

impl CorlsModel {
    /// Average of the two view predictors `(a1 <w1, z1> + a2 <w2, z2>) / 2`,
    /// each being the quantity regressed onto the labels.
    pub fn predict(&self, z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dims("view 1 dimension", self.w1.len(), z1.ncols())?;
        check_dims("view 2 dimension", self.w2.len(), z2.ncols())?;
        check_dims("view row counts", z1.nrows(), z2.nrows())?;
        let f = z1 * DVector::from_column_slice(&self.w1);
        let g = z2 * DVector::from_column_slice(&self.w2);
        Ok(f.iter()
            .zip(g.iter())
            .map(|(a, b)| 0.5 * (self.a1 * a + self.a2 * b) + self.intercept)
            .collect())
    }
}

/// Unlabeled second-moment blocks of the co-regularized system; reused
/// across many labeled fits.
#[derive(Clone, Debug)]
pub struct CorlsSystem {
    uu11: DMatrix<f64>,
    uu12: DMatrix<f64>,
    uu22: DMatrix<f64>,
}

impl CorlsSystem {
    pub fn new(z1_unl: &DMatrix<f64>, z2_unl: &DMatrix<f64>) -> Result<Self> {
        check_dims("unlabeled row counts", z1_unl.nrows(), z2_unl.nrows())?;
        Ok(CorlsSystem {
            uu11: z1_unl.tr_mul(z1_unl),
            uu12: z1_unl.tr_mul(z2_unl),
            uu22: z2_unl.tr_mul(z2_unl),
        })
    }

    /// Joint minimizer of
    /// `sum_lab [(a1<w1,z1> - y)^2 + (a2<w2,z2> - y)^2] + a_co sum_unl (<w1,z1> - <w2,z2>)^2`
    /// (plus `ridge (|w1|^2 + |w2|^2)` when requested).
    pub fn solve(&self, z1_lab: &DMatrix<f64>, z2_lab: &DMatrix<f64>, y: &[f64], params: &CorlsParams) -> Result<CorlsModel> {
        params.validate()?;
        let (d1, d2) = (self.uu11.nrows(), self.uu22.nrows());
        check_dims("view 1 dimension", d1, z1_lab.ncols())?;
        check_dims("view 2 dimension", d2, z2_lab.ncols())?;
        check_dims("view 1 labeled rows", y.len(), z1_lab.nrows())?;
        check_dims("view 2 labeled rows", y.len(), z2_lab.nrows())?;
        let mean = label_mean(y, params.center_labels);
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));

        let n = d1 + d2;
        let mut h = DMatrix::zeros(n, n);
        let h11 = z1_lab.tr_mul(z1_lab) * (params.a1 * params.a1) + &self.uu11 * params.a_co;
        let h22 = z2_lab.tr_mul(z2_lab) * (params.a2 * params.a2) + &self.uu22 * params.a_co;
        let h12 = &self.uu12 * (-params.a_co);
        h.view_mut((0, 0), (d1, d1)).copy_from(&h11);
        h.view_mut((d1, d1), (d2, d2)).copy_from(&h22);
        h.view_mut((0, d1), (d1, d2)).copy_from(&h12);
        h.view_mut((d1, 0), (d2, d1)).copy_from(&h12.transpose());
        for i in 0..n {
            h[(i, i)] += params.ridge;
        }
        let mut rhs = DVector::zeros(n);
        rhs.rows_mut(0, d1).copy_from(&(z1_lab.tr_mul(&yc) * params.a1));
        rhs.rows_mut(d1, d2).copy_from(&(z2_lab.tr_mul(&yc) * params.a2));

        let (w, jittered) = match solve_spd_strict(h.clone(), &rhs) {
            Some(w) => (w, false),
            None => {
                let j1 = 1e-10 * (h11.trace() / d1.max(1) as f64).max(f64::MIN_POSITIVE);
                let j2 = 1e-10 * (h22.trace() / d2.max(1) as f64).max(f64::MIN_POSITIVE);
                for i in 0..d1 {
                    h[(i, i)] += j1;
                }
                for i in d1..n {
                    h[(i, i)] += j2;
                }
                let w = solve_spd_strict(h, &rhs)
                    .ok_or_else(|| Error::Singular("co-regularized system is singular even after jitter".into()))?;
                (w, true)
            }
        };
        Ok(CorlsModel {
            w1: w.rows(0, d1).iter().copied().collect(),
            w2: w.rows(d1, d2).iter().copied().collect(),
            a1: params.a1,
            a2: params.a2,
            intercept: mean,
            jittered,
        })
    }
}

/// Cholesky solve that also rejects numerically singular factors.
fn solve_spd_strict(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.diagonal().amax();
    let chol = Cholesky::new(a)?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-14 * scale) {
        return None;
    }
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn cmp_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Ordering {
    a.shape()
        .cmp(&b.shape())
        .then_with(|| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Co-regularized least squares for one labeled/unlabeled split.
///
/// The two views enter symmetrically: exchanging `(view 1, a1)` with
/// `(view 2, a2)` exchanges `w1` and `w2` bit for bit, because the system is
/// always assembled with the views in a canonical order.
#[allow(clippy::too_many_arguments)]
pub fn fit_corls(
    z1_lab: &DMatrix<f64>,
    z2_lab: &DMatrix<f64>,
    y: &[f64],
    z1_unl: &DMatrix<f64>,
    z2_unl: &DMatrix<f64>,
    params: &CorlsParams,
) -> Result<CorlsModel> {
    params.validate()?;
    let swap = params
        .a1
        .total_cmp(&params.a2)
        .then_with(|| cmp_matrix(z1_lab, z2_lab))
        .then_with(|| cmp_matrix(z1_unl, z2_unl))
        .is_gt();
    if swap {
        let flipped = CorlsParams {
            a1: params.a2,
            a2: params.a1,
            ..*params
        };
        let m = CorlsSystem::new(z2_unl, z1_unl)?.solve(z2_lab, z1_lab, y, &flipped)?;
        Ok(CorlsModel {
            w1: m.w2,
            w2: m.w1,
            a1: params.a1,
            a2: params.a2,
            intercept: m.intercept,
            jittered: m.jittered,
        })
    } else {
        CorlsSystem::new(z1_unl, z2_unl)?.solve(z1_lab, z2_lab, y, params)
    }
}

/// The unnormalized co-regularized objective (ridge included when set).
#[allow(clippy::too_many_arguments)]
pub fn corls_objective(
    z1_lab: &DMatrix<f64>,
    z2_lab: &DMatrix<f64>,
    y: &[f64],
    z1_unl: &DMatrix<f64>,
    z2_unl: &DMatrix<f64>,
    params: &CorlsParams,
    w1: &[f64],
    w2: &[f64],
) -> f64 {
    let w1v = DVector::from_column_slice(w1);
    let w2v = DVector::from_column_slice(w2);
    let mean = label_mean(y, params.center_labels);
    let f = z1_lab * &w1v;
    let g = z2_lab * &w2v;
    let mut total = 0.0;
    for i in 0..y.len() {
        let t = y[i] - mean;
        total += (params.a1 * f[i] - t).powi(2) + (params.a2 * g[i] - t).powi(2);
    }
    let fu = z1_unl * &w1v;
    let gu = z2_unl * &w2v;
    total += params.a_co * fu.iter().zip(gu.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    total + params.ridge * (w1v.norm_squared() + w2v.norm_squared())
}

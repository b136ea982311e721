//! Experiment runner: repeated labeled-set resampling, per-algorithm
//! cross-validated fits, and Table-style reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cca::{fit_cca, project_view, CcaModel};
use crate::dataset::{load_dataset, DataFormat, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::kernels::{median_pairwise_distance, KernelSpec, DEFAULT_RANK_TOL};
use crate::nystrom::{fit_nystrom_from_gram, fit_rks_map, sample_landmarks_from, LandmarkSplit, NystromMap};
use crate::regressors::{
    fit_krr, fit_top_directions, fit_xnv, mean_squared_error, predict, CorlsParams, CorlsSystem, LinearModel,
    XnvParams,
};
use crate::rng::{substream, substream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Xnv,
    Krr,
    Sssl,
    Corls,
    /// XNV with random Fourier feature views instead of Nystrom views.
    Xks,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Xnv => "xnv",
            Algorithm::Krr => "krr",
            Algorithm::Sssl => "sssl",
            Algorithm::Corls => "corls",
            Algorithm::Xks => "xks",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xnv" => Ok(Algorithm::Xnv),
            "krr" => Ok(Algorithm::Krr),
            "sssl" | "sssl_m" => Ok(Algorithm::Sssl),
            "corls" => Ok(Algorithm::Corls),
            "xks" => Ok(Algorithm::Xks),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
    Poly,
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            "linear" => Ok(KernelFamily::Linear),
            "poly" | "polynomial" => Ok(KernelFamily::Poly),
            other => Err(Error::Config(format!("unknown kernel '{other}' (expected gaussian, linear or poly)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}' (expected json or csv)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: Vec<PathBuf>,
    pub format: DataFormat,
    pub label: String,
    pub algos: Vec<Algorithm>,
    pub kernel: KernelFamily,
    /// Fixed Gaussian bandwidth. When absent the bandwidth is cross-validated
    /// over `sigma_grid` multiples of the median pairwise distance.
    pub sigma: Option<f64>,
    pub sigma_grid: Vec<f64>,
    pub degree: u32,
    pub offset: f64,
    /// Landmarks per view (`M`); XNV draws `2M` in total.
    pub landmarks: usize,
    pub gamma_grid: Vec<f64>,
    /// Co-regularization weights, as multiples of `labeled / unlabeled`.
    pub coupling_grid: Vec<f64>,
    pub cca_eps: f64,
    /// Penalties are `(1 - lambda) / max(lambda, floor)`; weak directions are
    /// kept with a capped penalty rather than dropped.
    pub lambda_floor: f64,
    /// Multiplier on the canonical penalty.
    pub penalty_scale: f64,
    pub ell: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_frac: f64,
    pub folds: usize,
    pub standardize: bool,
    /// Run the first cell once, untimed and discarded, before measuring.
    pub warmup: bool,
    pub out: Option<PathBuf>,
    pub report: ReportFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: Vec::new(),
            format: DataFormat::Csv,
            label: "y".into(),
            algos: vec![Algorithm::Xnv, Algorithm::Krr, Algorithm::Sssl],
            kernel: KernelFamily::Gaussian,
            sigma: None,
            sigma_grid: vec![0.5, 1.0, 2.0],
            degree: 2,
            offset: 1.0,
            landmarks: 200,
            gamma_grid: (-6..=1).map(|e| 10f64.powi(e)).collect(),
            coupling_grid: vec![0.01, 0.1, 1.0],
            cca_eps: crate::cca::DEFAULT_REG_EPS,
            lambda_floor: crate::cca::DEFAULT_LAMBDA_FLOOR,
            penalty_scale: 1.0,
            ell: vec![100, 200, 300, 400, 500],
            seeds: (0..10).collect(),
            test_frac: 0.2,
            folds: 5,
            standardize: true,
            warmup: true,
            out: None,
            report: ReportFormat::Json,
        }
    }
}

fn config_err(key: &str, value: &str, why: impl fmt::Display) -> Error {
    Error::Config(format!("{key} = '{value}': {why}"))
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| config_err(key, value, e))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s))
        .collect()
}

/// Integer lists also accept half-open ranges such as `0..10`.
fn parse_int_list<T: FromStr + TryFrom<u64>>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = parse_scalar(key, a)?;
            let b: u64 = parse_scalar(key, b)?;
            for v in a..b {
                out.push(T::try_from(v).map_err(|_| config_err(key, value, "value out of range"))?);
            }
        } else {
            out.push(parse_scalar(key, part)?);
        }
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(config_err(key, value, "expected true or false")),
    }
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value, got '{raw}'", i + 1)))?;
        let key = k.trim().trim_start_matches("--").to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Sets one key. Keys are the long flag names; `data` appends.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.replace('_', "-").as_str() {
            "data" => self.data.push(PathBuf::from(value.trim())),
            "format" => self.format = value.parse().map_err(|e| config_err(key, value, e))?,
            "label" => self.label = value.trim().to_string(),
            "algos" => self.algos = parse_list(key, value)?,
            "kernel" => self.kernel = value.parse()?,
            "sigma" => {
                self.sigma = match value.trim() {
                    "" | "auto" | "median" => None,
                    v => Some(parse_scalar(key, v)?),
                }
            }
            "sigma-grid" => self.sigma_grid = parse_list(key, value)?,
            "degree" => self.degree = parse_scalar(key, value)?,
            "offset" => self.offset = parse_scalar(key, value)?,
            "landmarks" => self.landmarks = parse_scalar(key, value)?,
            "gamma-grid" => self.gamma_grid = parse_list(key, value)?,
            "coupling-grid" => self.coupling_grid = parse_list(key, value)?,
            "cca-eps" => self.cca_eps = parse_scalar(key, value)?,
            "lambda-floor" => self.lambda_floor = parse_scalar(key, value)?,
            "penalty-scale" => self.penalty_scale = parse_scalar(key, value)?,
            "ell" => self.ell = parse_int_list(key, value)?,
            "seeds" => self.seeds = parse_int_list(key, value)?,
            "test-frac" => self.test_frac = parse_scalar(key, value)?,
            "folds" => self.folds = parse_scalar(key, value)?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "warmup" => self.warmup = parse_bool(key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "report" => self.report = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a batch of settings. Any `data` entry in the batch replaces the
    /// paths set by earlier batches, so later sources override earlier ones.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if pairs.iter().any(|(k, _)| k == "data") {
            self.data.clear();
        }
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&parse_config_text(&text)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.ell.is_empty() || self.ell.contains(&0) {
            return bad("labeled sizes must be a non-empty list of positive counts".into());
        }
        if self.algos.is_empty() {
            return bad("no algorithms selected".into());
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return bad(format!("test-frac must lie in (0, 1), got {}", self.test_frac));
        }
        if self.landmarks == 0 {
            return bad("landmarks must be positive".into());
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("gamma-grid must be a non-empty list of positive values".into());
        }
        if self.coupling_grid.is_empty() || self.coupling_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("coupling-grid must be a non-empty list of positive values".into());
        }
        if self.sigma_grid.is_empty() || self.sigma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("sigma-grid must be a non-empty list of positive values".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma must be positive, got {s}"));
            }
        }
        if !(self.cca_eps >= 0.0) || !(self.lambda_floor > 0.0) {
            return bad("cca-eps must be nonnegative and lambda-floor positive".into());
        }
        if !(self.penalty_scale >= 0.0 && self.penalty_scale.is_finite()) {
            return bad(format!("penalty-scale must be nonnegative, got {}", self.penalty_scale));
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.kernel == KernelFamily::Poly {
            KernelSpec::polynomial(self.degree, self.offset).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.algos.contains(&Algorithm::Xks) && self.kernel != KernelFamily::Gaussian {
            return bad("xks needs the gaussian kernel".into());
        }
        Ok(())
    }

    /// Kernel candidates; the bandwidth grid applies only to the Gaussian family.
    fn kernels(&self, median_distance: f64) -> Vec<KernelSpec> {
        match self.kernel {
            KernelFamily::Gaussian => match self.sigma {
                Some(s) => vec![KernelSpec::Gaussian { bandwidth: s }],
                None => self
                    .sigma_grid
                    .iter()
                    .map(|m| KernelSpec::Gaussian { bandwidth: m * median_distance })
                    .collect(),
            },
            KernelFamily::Linear => vec![KernelSpec::Linear],
            KernelFamily::Poly => vec![KernelSpec::Polynomial { degree: self.degree, offset: self.offset }],
        }
    }
}

// ---------------------------------------------------------------------------
// Shared building blocks, also used by the train/featurize pipeline.

/// `<x_i, y_j>` plus the squared row norms; every supported kernel is a
/// function of these, so one matrix product serves a whole bandwidth grid.
pub(crate) struct InnerProducts {
    inner: DMatrix<f64>,
    x_sq: Vec<f64>,
    y_sq: Vec<f64>,
}

fn row_sq_norms(x: &DMatrix<f64>) -> Vec<f64> {
    x.row_iter().map(|r| r.norm_squared()).collect()
}

impl InnerProducts {
    pub(crate) fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        InnerProducts { inner: x * y.transpose(), x_sq: row_sq_norms(x), y_sq: row_sq_norms(y) }
    }

    pub(crate) fn kernel(&self, spec: &KernelSpec) -> DMatrix<f64> {
        DMatrix::from_fn(self.inner.nrows(), self.inner.ncols(), |i, j| {
            spec.from_inner(self.inner[(i, j)], self.x_sq[i], self.y_sq[j])
        })
    }
}

/// Nystrom map for landmarks `cols` given kernel values of all rows against
/// those landmarks; `landmark_rows[c]` is the row index of landmark `c`.
pub(crate) fn nystrom_from_block(
    x: &DMatrix<f64>,
    k_all: &DMatrix<f64>,
    landmark_rows: &[usize],
    cols: std::ops::Range<usize>,
    kernel: KernelSpec,
) -> Result<NystromMap> {
    let sub: Vec<usize> = landmark_rows[cols.clone()].to_vec();
    let k = DMatrix::from_fn(sub.len(), sub.len(), |a, b| {
        0.5 * (k_all[(sub[a], cols.start + b)] + k_all[(sub[b], cols.start + a)])
    });
    fit_nystrom_from_gram(x.select_rows(&sub), &k, kernel, DEFAULT_RANK_TOL)
}

/// Two views of every row, their CCA, and canonical coordinates of view 1.
pub(crate) struct CorrelatedViews {
    pub z1: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub cca: CcaModel,
    pub zbar: DMatrix<f64>,
}

/// Fits CCA on `cca_rows` only and projects every row.
pub(crate) fn correlate(z1: DMatrix<f64>, z2: DMatrix<f64>, cca_rows: &[usize], cca_eps: f64) -> Result<CorrelatedViews> {
    let cca = fit_cca(&z1.select_rows(cca_rows), &z2.select_rows(cca_rows), cca_eps)?;
    let zbar = project_view(&cca, &z1)?;
    Ok(CorrelatedViews { z1, z2, cca, zbar })
}

/// Nystrom maps for both views. `k_all` holds kernel values of every row
/// against `split.view1` followed by `split.view2`.
pub(crate) fn nystrom_views(
    x: &DMatrix<f64>,
    k_all: &DMatrix<f64>,
    split: &LandmarkSplit,
    kernel: KernelSpec,
) -> Result<(NystromMap, NystromMap, DMatrix<f64>, DMatrix<f64>)> {
    let m = split.view1.len();
    let lm: Vec<usize> = split.all().collect();
    let map1 = nystrom_from_block(x, k_all, &lm, 0..m, kernel)?;
    let map2 = nystrom_from_block(x, k_all, &lm, m..2 * m, kernel)?;
    let z1 = map1.featurize_kernel(&k_all.columns(0, m).into_owned())?;
    let z2 = map2.featurize_kernel(&k_all.columns(m, m).into_owned())?;
    Ok((map1, map2, z1, z2))
}

/// `(train, held_out)` position lists of a `k`-fold split of `0..n`.
pub(crate) fn cv_folds(n: usize, k: usize, rng: &mut crate::rng::StreamRng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let k = k.min(n);
    (0..k)
        .map(|f| {
            let held: Vec<usize> = perm.iter().copied().skip(f).step_by(k).collect();
            let train: Vec<usize> = perm.iter().copied().enumerate().filter(|(i, _)| i % k != f).map(|(_, v)| v).collect();
            (train, held)
        })
        .collect()
}

/// Candidate with the smallest summed held-out squared error; ties keep the
/// earliest candidate. Candidates whose fits fail numerically are skipped.
pub(crate) fn cv_select<P: Clone>(
    candidates: &[P],
    folds: &[(Vec<usize>, Vec<usize>)],
    mut held_out_sse: impl FnMut(&P, &[usize], &[usize]) -> Result<f64>,
) -> Result<P> {
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    if folds.len() < 2 {
        return Err(Error::InsufficientData("cross-validation needs at least 2 labeled rows".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut last_err = None;
    'cand: for (c, p) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for (train, held) in folds {
            match held_out_sse(p, train, held) {
                Ok(v) if v.is_finite() => total += v,
                Ok(_) => continue 'cand,
                Err(e) if e.exit_code() == 3 => {
                    last_err = Some(e);
                    continue 'cand;
                }
                Err(e) => return Err(e),
            }
        }
        if best.is_none_or(|(b, _)| total < b) {
            best = Some((total, c));
        }
    }
    match best {
        Some((_, c)) => Ok(candidates[c].clone()),
        None => Err(last_err.unwrap_or_else(|| Error::Numerical("every candidate failed".into()))),
    }
}

pub(crate) fn sse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum()
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn assert_disjoint(a: &[usize], b: &[usize], what: &str) {
    let set: std::collections::HashSet<_> = a.iter().collect();
    assert!(!b.iter().any(|i| set.contains(i)), "split hygiene violated: {what}");
}

// ---------------------------------------------------------------------------
// Report types.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub ell: usize,
    pub seed: u64,
    pub test_mse: f64,
    /// Hyperparameters chosen by cross-validation.
    pub selected: BTreeMap<String, f64>,
    pub train_seconds: f64,
    pub featurize_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub ell: usize,
    pub seeds: usize,
    pub mean_mse: f64,
    /// Standard error of the mean test MSE; absent with a single seed.
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub baseline: Algorithm,
    pub ell: usize,
    /// `(mean_base - mean_alg) / mean_base`.
    pub error_reduction: f64,
    /// Same ratio for standard errors.
    pub std_error_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub standardized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config: ExperimentConfig,
    pub datasets: Vec<DatasetSummary>,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
    pub comparisons: Vec<Comparison>,
    /// Modelling conventions that the config alone does not pin down.
    pub conventions: BTreeMap<String, String>,
}

fn conventions(config: &ExperimentConfig) -> BTreeMap<String, String> {
    let entries = [
        (
            "lambda_floor",
            format!(
                "canonical penalty (1 - lambda) / max(lambda, {}); directions below the floor keep the capped penalty, none are dropped",
                config.lambda_floor
            ),
        ),
        ("penalty_scale", format!("{}", config.penalty_scale)),
        ("corls", "ridge gamma * l per view, coupling c * l / u, prediction (f + g) / 2".to_string()),
        ("sssl", "2M pooled landmarks, top-s directions with s chosen by cross-validation".to_string()),
        ("split", "test rows are test_frac of the labeled pool; ell labeled rows drawn from the rest".to_string()),
        ("timing", "wall clock per cell, warm-up run excluded".to_string()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

const BASELINES: [Algorithm; 2] = [Algorithm::Krr, Algorithm::Sssl];

/// Means, standard errors and reductions versus KRR and SSSL_M, grouped in
/// first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> (Vec<Aggregate>, Vec<Comparison>) {
    let mut keys: Vec<(String, Algorithm, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, Algorithm, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.algorithm, r.ell);
        groups.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            Vec::new()
        });
        groups.get_mut(&(r.dataset.clone(), r.algorithm, r.ell)).unwrap().push(r.test_mse);
    }
    let aggregates: Vec<Aggregate> = keys
        .iter()
        .map(|key| {
            let errs = &groups[key];
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let std_error = (errs.len() > 1).then(|| {
                let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            });
            Aggregate {
                dataset: key.0.clone(),
                algorithm: key.1,
                ell: key.2,
                seeds: errs.len(),
                mean_mse: mean,
                std_error,
            }
        })
        .collect();
    let find = |d: &str, a: Algorithm, l: usize| aggregates.iter().find(|g| g.dataset == d && g.algorithm == a && g.ell == l);
    let mut comparisons = Vec::new();
    for g in &aggregates {
        for base in BASELINES {
            if base == g.algorithm {
                continue;
            }
            if let Some(b) = find(&g.dataset, base, g.ell) {
                let std_error_reduction = match (g.std_error, b.std_error) {
                    (Some(s), Some(sb)) if sb > 0.0 => Some((sb - s) / sb),
                    _ => None,
                };
                comparisons.push(Comparison {
                    dataset: g.dataset.clone(),
                    algorithm: g.algorithm,
                    baseline: base,
                    ell: g.ell,
                    error_reduction: (b.mean_mse - g.mean_mse) / b.mean_mse,
                    std_error_reduction,
                });
            }
        }
    }
    (aggregates, comparisons)
}

/// Rows are metrics, columns are labeled-set sizes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub ells: Vec<usize>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    fn push(&mut self, name: String, value: impl Fn(usize) -> Option<f64>) {
        let vals: Vec<Option<f64>> = self.ells.iter().map(|&l| value(l)).collect();
        if vals.iter().any(Option::is_some) {
            self.rows.push((name, vals));
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("metric".to_string())
            .chain(self.ells.iter().map(|l| format!("ell={l}")))
            .collect();
        let csv_err = |e: csv::Error| Error::Data(format!("csv output: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for (name, vals) in &self.rows {
            let rec: Vec<String> = std::iter::once(name.clone())
                .chain(vals.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()))
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv output: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

impl Report {
    pub fn table(&self) -> Table {
        let mut ells: Vec<usize> = self.aggregates.iter().map(|a| a.ell).collect();
        ells.sort_unstable();
        ells.dedup();
        let mut table = Table { ells, rows: Vec::new() };
        let mut datasets: Vec<&str> = Vec::new();
        for a in &self.aggregates {
            if !datasets.contains(&a.dataset.as_str()) {
                datasets.push(&a.dataset);
            }
        }
        let mut pairs: Vec<(Algorithm, Algorithm)> = Vec::new();
        for c in &self.comparisons {
            if !pairs.contains(&(c.algorithm, c.baseline)) {
                pairs.push((c.algorithm, c.baseline));
            }
        }
        let comparison = |d: &str, a: Algorithm, b: Algorithm, l: usize| {
            self.comparisons
                .iter()
                .find(|c| c.dataset == d && c.algorithm == a && c.baseline == b && c.ell == l)
        };
        let algos: Vec<Algorithm> = self.config.algos.clone();
        for d in &datasets {
            for &a in &algos {
                let agg = |l: usize| self.aggregates.iter().find(|g| g.dataset == *d && g.algorithm == a && g.ell == l);
                table.push(format!("{d}: mean test mse, {a}"), |l| agg(l).map(|g| g.mean_mse));
                table.push(format!("{d}: standard error, {a}"), |l| agg(l).and_then(|g| g.std_error));
            }
            for &(a, b) in &pairs {
                table.push(format!("{d}: reduction in error, {a} vs {b}"), |l| {
                    comparison(d, a, b, l).map(|c| c.error_reduction)
                });
                table.push(format!("{d}: reduction in standard error, {a} vs {b}"), |l| {
                    comparison(d, a, b, l).and_then(|c| c.std_error_reduction)
                });
            }
        }
        if datasets.len() > 1 {
            for &(a, b) in &pairs {
                let avg = |f: &dyn Fn(&Comparison) -> Option<f64>, l: usize| {
                    let v: Vec<f64> = datasets.iter().filter_map(|d| comparison(d, a, b, l).and_then(f)).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                table.push(format!("avg reduction in error, {a} vs {b}"), |l| avg(&|c| Some(c.error_reduction), l));
                table.push(format!("avg reduction in standard error, {a} vs {b}"), |l| {
                    avg(&|c| c.std_error_reduction, l)
                });
            }
        }
        table
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.table().to_csv(),
        }
    }
}

/// Writes the report to `out`, or returns the rendered text when `out` is
/// `None`.
pub fn emit_report(report: &Report, format: ReportFormat, out: Option<&Path>) -> Result<String> {
    let text = report.render(format)?;
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// The runner.

/// Per-kernel precomputation shared by every labeled-set size of one cell.
struct KernelViews {
    kernel: KernelSpec,
    nystrom: Option<CorrelatedViews>,
    /// SSSL_M features over all `2M` landmarks.
    pooled: Option<DMatrix<f64>>,
    rks: Option<CorrelatedViews>,
    seconds: BTreeMap<Algorithm, f64>,
}

struct Cell<'a> {
    config: &'a ExperimentConfig,
    ds: &'a Dataset,
    di: u64,
    seed: u64,
    x: DMatrix<f64>,
    test: Vec<usize>,
    train_pool: Vec<usize>,
    nontest: Vec<usize>,
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

impl<'a> Cell<'a> {
    fn new(config: &'a ExperimentConfig, ds: &'a Dataset, di: usize, seed: u64) -> Result<Self> {
        let di = di as u64;
        let mut pool = ds.labeled_indices();
        let n_test = ((config.test_frac * pool.len() as f64).round() as usize).max(1);
        let max_ell = config.ell.iter().copied().max().unwrap_or(0);
        if n_test + max_ell > pool.len() {
            return Err(Error::InsufficientData(format!(
                "{}: {} labeled rows cannot hold a test split of {n_test} and {max_ell} training labels",
                ds.name,
                pool.len()
            )));
        }
        pool.shuffle(&mut substream(seed, "test-split", &[di]));
        let test = sorted(pool[..n_test].to_vec());
        let train_pool = sorted(pool[n_test..].to_vec());
        let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
        let nontest: Vec<usize> = (0..ds.len()).filter(|i| !test_set.contains(i)).collect();
        let x = if config.standardize {
            Standardization::fit(&ds.features, &nontest)?.apply(&ds.features)?
        } else {
            ds.features.clone()
        };
        Ok(Cell { config, ds, di, seed, x, test, train_pool, nontest })
    }

    fn median_distance(&self) -> f64 {
        let mut rows = self.nontest.clone();
        rows.shuffle(&mut substream(self.seed, "bandwidth", &[self.di]));
        rows.truncate(500);
        rows.sort_unstable();
        median_pairwise_distance(&self.x.select_rows(&rows))
    }

    fn needs(&self, a: Algorithm) -> bool {
        self.config.algos.contains(&a)
    }

    fn kernel_views(&self, landmarks: Option<&LandmarkSplit>) -> Result<Vec<KernelViews>> {
        let cfg = self.config;
        let needs_gaussian_scale = cfg.kernel == KernelFamily::Gaussian && cfg.sigma.is_none();
        let median = if needs_gaussian_scale { self.median_distance() } else { 1.0 };
        let kernels = cfg.kernels(median);

        let start = Instant::now();
        let inner = landmarks.map(|split| {
            let lm: Vec<usize> = split.all().collect();
            InnerProducts::new(&self.x, &self.x.select_rows(&lm))
        });
        let shared = start.elapsed().as_secs_f64();

        kernels
            .into_iter()
            .map(|kernel| {
                let mut seconds = BTreeMap::new();
                let mut nystrom = None;
                let mut pooled = None;
                if let (Some(split), Some(inner)) = (landmarks, &inner) {
                    let t = Instant::now();
                    let k_all = inner.kernel(&kernel);
                    let block = t.elapsed().as_secs_f64() + shared;
                    if self.needs(Algorithm::Xnv) || self.needs(Algorithm::Corls) {
                        let t = Instant::now();
                        let (_, _, z1, z2) = nystrom_views(&self.x, &k_all, split, kernel)?;
                        nystrom = Some(correlate(z1, z2, &self.nontest, cfg.cca_eps)?);
                        let s = block + t.elapsed().as_secs_f64();
                        seconds.insert(Algorithm::Xnv, s);
                        seconds.insert(Algorithm::Corls, s);
                    }
                    if self.needs(Algorithm::Sssl) {
                        let t = Instant::now();
                        let lm: Vec<usize> = split.all().collect();
                        let map = nystrom_from_block(&self.x, &k_all, &lm, 0..lm.len(), kernel)?;
                        pooled = Some(map.featurize_kernel(&k_all)?);
                        seconds.insert(Algorithm::Sssl, block + t.elapsed().as_secs_f64());
                    }
                }
                let mut rks = None;
                if self.needs(Algorithm::Xks) {
                    let t = Instant::now();
                    rks = Some(self.rks_views(kernel)?);
                    seconds.insert(Algorithm::Xks, t.elapsed().as_secs_f64());
                }
                Ok(KernelViews { kernel, nystrom, pooled, rks, seconds })
            })
            .collect()
    }

    fn rks_views(&self, kernel: KernelSpec) -> Result<CorrelatedViews> {
        let m = self.config.landmarks;
        let d = self.x.ncols();
        let f1 = fit_rks_map(d, m, kernel, substream_seed(self.seed, "xks-view1", &[self.di]))?;
        let f2 = fit_rks_map(d, m, kernel, substream_seed(self.seed, "xks-view2", &[self.di]))?;
        let z1 = f1.featurize(&self.x)?;
        let z2 = f2.featurize(&self.x)?;
        correlate(z1, z2, &self.nontest, self.config.cca_eps)
    }

    fn run(&self) -> Result<Vec<ResultRow>> {
        let cfg = self.config;
        let uses_nystrom = [Algorithm::Xnv, Algorithm::Sssl, Algorithm::Corls].iter().any(|&a| self.needs(a));
        let landmarks = if uses_nystrom {
            let mut rng = substream(self.seed, "landmarks", &[self.di]);
            let split = sample_landmarks_from(&self.nontest, 2 * cfg.landmarks, &mut rng)?;
            let lm: Vec<usize> = split.all().collect();
            assert_disjoint(&self.test, &lm, "test rows among landmarks");
            Some(split)
        } else {
            None
        };
        assert_disjoint(&self.test, &self.nontest, "test rows among CCA rows");
        let views = self.kernel_views(landmarks.as_ref())?;

        let y_all: Vec<f64> = self.ds.labels.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let y_test = pick(&y_all, &self.test);
        let mut rows = Vec::new();
        for &ell in &cfg.ell {
            let mut labeled = self.train_pool.clone();
            labeled.shuffle(&mut substream(self.seed, "labeled", &[self.di, ell as u64]));
            labeled.truncate(ell);
            assert_disjoint(&self.test, &labeled, "test rows among training rows");
            let y = pick(&y_all, &labeled);
            let folds = cv_folds(ell, cfg.folds, &mut substream(self.seed, "cv", &[self.di, ell as u64]));
            for &algo in &cfg.algos {
                let t = Instant::now();
                let (test_mse, selected, kernel_index) = match algo {
                    Algorithm::Xnv => self.run_xnv(&views, |v| v.nystrom.as_ref(), &labeled, &y, &y_test, &folds)?,
                    Algorithm::Xks => self.run_xnv(&views, |v| v.rks.as_ref(), &labeled, &y, &y_test, &folds)?,
                    Algorithm::Krr => self.run_krr(&views, &labeled, &y, &y_test, &folds)?,
                    Algorithm::Sssl => self.run_sssl(&views, &labeled, &y, &y_test, &folds)?,
                    Algorithm::Corls => self.run_corls(&views, &labeled, &y, &y_test, &folds)?,
                };
                let train_seconds = t.elapsed().as_secs_f64();
                let featurize_seconds: f64 = views.iter().map(|v| v.seconds.get(&algo).copied().unwrap_or(0.0)).sum();
                let mut selected = selected;
                if let KernelSpec::Gaussian { bandwidth } = views[kernel_index].kernel {
                    selected.insert("sigma".into(), bandwidth);
                }
                rows.push(ResultRow {
                    dataset: self.ds.name.clone(),
                    algorithm: algo,
                    ell,
                    seed: self.seed,
                    test_mse,
                    selected,
                    train_seconds,
                    featurize_seconds,
                });
            }
        }
        Ok(rows)
    }

    fn run_xnv(
        &self,
        views: &[KernelViews],
        pick_views: impl Fn(&KernelViews) -> Option<&CorrelatedViews>,
        labeled: &[usize],
        y: &[f64],
        y_test: &[f64],
        folds: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(f64, BTreeMap<String, f64>, usize)> {
        let (floor, scale) = (self.config.lambda_floor, self.config.penalty_scale);
        let feats: Vec<(DMatrix<f64>, &[f64])> = views
            .iter()
            .map(|v| {
                let cv = pick_views(v).expect("views computed for requested algorithm");
                (cv.zbar.select_rows(labeled), cv.cca.correlations.as_slice())
            })
            .collect();
        let candidates: Vec<(usize, f64)> = (0..views.len())
            .flat_map(|k| self.config.gamma_grid.iter().map(move |&g| (k, g)))
            .collect();
        let params = |g: f64| XnvParams { lambda_floor: floor, penalty_scale: scale, ..XnvParams::new(g) };
        let (k, gamma) = cv_select(&candidates, folds, |&(k, g), train, held| {
            let (z, corr) = &feats[k];
            let m = fit_xnv(&z.select_rows(train), &pick(y, train), corr, &params(g))?;
            Ok(sse(&predict(&m, &z.select_rows(held))?, &pick(y, held)))
        })?;
        let (z, corr) = &feats[k];
        let model = fit_xnv(z, y, corr, &params(gamma))?;
        let cv = pick_views(&views[k]).expect("views computed");
        let pred = predict(&model, &cv.zbar.select_rows(&self.test))?;
        Ok((mean_squared_error(&pred, y_test)?, BTreeMap::from([("gamma".to_string(), gamma)]), k))
    }

    fn run_krr(
        &self,
        views: &[KernelViews],
        labeled: &[usize],
        y: &[f64],
        y_test: &[f64],
        folds: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(f64, BTreeMap<String, f64>, usize)> {
        let xl = self.x.select_rows(labeled);
        let xt = self.x.select_rows(&self.test);
        let ll = InnerProducts::new(&xl, &xl);
        let grams: Vec<DMatrix<f64>> = views
            .iter()
            .map(|v| {
                let k = ll.kernel(&v.kernel);
                DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| 0.5 * (k[(i, j)] + k[(j, i)]))
            })
            .collect();
        let candidates: Vec<(usize, f64)> = (0..views.len())
            .flat_map(|k| self.config.gamma_grid.iter().map(move |&g| (k, g)))
            .collect();
        let (k, gamma) = cv_select(&candidates, folds, |&(k, g), train, held| {
            let kk = &grams[k];
            let ktr = kk.select_rows(train).select_columns(train);
            let kte = kk.select_rows(held).select_columns(train);
            let m = fit_krr(&ktr, &pick(y, train), g, true)?;
            Ok(sse(&m.predict_kernel(&kte)?, &pick(y, held)))
        })?;
        let model = fit_krr(&grams[k], y, gamma, true)?;
        let k_test = InnerProducts::new(&xt, &xl).kernel(&views[k].kernel);
        let pred = model.predict_kernel(&k_test)?;
        Ok((mean_squared_error(&pred, y_test)?, BTreeMap::from([("gamma".to_string(), gamma)]), k))
    }

    fn run_sssl(
        &self,
        views: &[KernelViews],
        labeled: &[usize],
        y: &[f64],
        y_test: &[f64],
        folds: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(f64, BTreeMap<String, f64>, usize)> {
        let feats: Vec<DMatrix<f64>> = views
            .iter()
            .map(|v| v.pooled.as_ref().expect("pooled features computed").select_rows(labeled))
            .collect();
        let min_train = folds.iter().map(|(t, _)| t.len()).min().unwrap_or(labeled.len());
        let mut candidates = Vec::new();
        for (k, f) in feats.iter().enumerate() {
            let cap = f.ncols().min(min_train.saturating_sub(1)).max(1);
            let mut s = 1;
            while s <= cap {
                candidates.push((k, s));
                s *= 2;
            }
        }
        let (k, s) = cv_select(&candidates, folds, |&(k, s), train, held| {
            let f = &feats[k];
            let m = fit_top_directions(&f.select_rows(train), &pick(y, train), s)?;
            Ok(sse(&predict(&m, &f.select_rows(held).columns(0, s).into_owned())?, &pick(y, held)))
        })?;
        let model: LinearModel = fit_top_directions(&feats[k], y, s)?;
        let test = views[k].pooled.as_ref().expect("pooled").select_rows(&self.test);
        let pred = predict(&model, &test.columns(0, s).into_owned())?;
        Ok((mean_squared_error(&pred, y_test)?, BTreeMap::from([("s".to_string(), s as f64)]), k))
    }

    fn run_corls(
        &self,
        views: &[KernelViews],
        labeled: &[usize],
        y: &[f64],
        y_test: &[f64],
        folds: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<(f64, BTreeMap<String, f64>, usize)> {
        let labeled_set: std::collections::HashSet<usize> = labeled.iter().copied().collect();
        let unlabeled: Vec<usize> = self.nontest.iter().copied().filter(|i| !labeled_set.contains(i)).collect();
        if unlabeled.is_empty() {
            return Err(Error::InsufficientData("co-regularization needs unlabeled rows".into()));
        }
        let u = unlabeled.len() as f64;
        struct Prepared {
            system: CorlsSystem,
            z1: DMatrix<f64>,
            z2: DMatrix<f64>,
        }
        let prepared: Vec<Prepared> = views
            .iter()
            .map(|v| {
                let nv = v.nystrom.as_ref().expect("nystrom views computed");
                Ok(Prepared {
                    system: CorlsSystem::new(&nv.z1.select_rows(&unlabeled), &nv.z2.select_rows(&unlabeled))?,
                    z1: nv.z1.select_rows(labeled),
                    z2: nv.z2.select_rows(labeled),
                })
            })
            .collect::<Result<_>>()?;
        let mut candidates = Vec::new();
        for k in 0..views.len() {
            for &c in &self.config.coupling_grid {
                for &g in &self.config.gamma_grid {
                    candidates.push((k, c, g));
                }
            }
        }
        let params = |c: f64, g: f64, n: usize| CorlsParams {
            ridge: g * n as f64,
            center_labels: true,
            ..CorlsParams::new(1.0, 1.0, c * n as f64 / u)
        };
        let (k, c, g) = cv_select(&candidates, folds, |&(k, c, g), train, held| {
            let p = &prepared[k];
            let m = p.system.solve(
                &p.z1.select_rows(train),
                &p.z2.select_rows(train),
                &pick(y, train),
                &params(c, g, train.len()),
            )?;
            Ok(sse(&m.predict(&p.z1.select_rows(held), &p.z2.select_rows(held))?, &pick(y, held)))
        })?;
        let p = &prepared[k];
        let model = p.system.solve(&p.z1, &p.z2, y, &params(c, g, labeled.len()))?;
        let nv = views[k].nystrom.as_ref().expect("nystrom views");
        let pred = model.predict(&nv.z1.select_rows(&self.test), &nv.z2.select_rows(&self.test))?;
        Ok((
            mean_squared_error(&pred, y_test)?,
            BTreeMap::from([("gamma".to_string(), g), ("coupling".to_string(), c)]),
            k,
        ))
    }
}

fn summarize(ds: &Dataset, standardized: bool) -> DatasetSummary {
    DatasetSummary {
        name: ds.name.clone(),
        rows: ds.len(),
        dim: ds.dim(),
        labeled: ds.labeled_indices().len(),
        unlabeled: ds.unlabeled_indices().len(),
        standardized,
    }
}

/// Runs the configured experiment on in-memory datasets.
pub fn run_on_datasets(config: &ExperimentConfig, datasets: &[Dataset]) -> Result<Report> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("no datasets given".into()));
    }
    let cells: Vec<(usize, u64)> = (0..datasets.len())
        .flat_map(|d| config.seeds.iter().map(move |&s| (d, s)))
        .collect();
    // Fail fast on infeasible splits before any heavy work.
    for (d, ds) in datasets.iter().enumerate() {
        Cell::new(config, ds, d, config.seeds[0])?;
    }
    if config.warmup {
        let (d, s) = cells[0];
        Cell::new(config, &datasets[d], d, s)?.run()?;
    }
    let results: Vec<Result<Vec<ResultRow>>> = cells
        .par_iter()
        .map(|&(d, s)| Cell::new(config, &datasets[d], d, s)?.run())
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let (aggregates, comparisons) = aggregate(&rows);
    Ok(Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        datasets: datasets.iter().map(|ds| summarize(ds, config.standardize)).collect(),
        rows,
        aggregates,
        comparisons,
        conventions: conventions(config),
    })
}

/// Loads every configured dataset and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    if config.data.is_empty() {
        return Err(Error::Config("no dataset paths given".into()));
    }
    let datasets = config
        .data
        .iter()
        .map(|p| load_dataset(p, config.format, &config.label))
        .collect::<Result<Vec<_>>>()?;
    run_on_datasets(config, &datasets)
}

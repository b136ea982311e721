//! A fitted XNV model bundled with its featurization, for the train / eval /
//! featurize commands.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cca::{project_view, CcaModel};
use crate::dataset::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::experiment::{correlate, cv_folds, cv_select, nystrom_views, sse, ExperimentConfig, InnerProducts, KernelFamily};
use crate::kernels::{median_pairwise_distance, KernelSpec};
use crate::nystrom::{sample_landmarks_from, NystromMap};
use crate::regressors::{fit_xnv, predict, LinearModel, XnvParams};
use crate::rng::substream;

/// Settings shared with the experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub kernel: KernelFamily,
    pub sigma: Option<f64>,
    pub sigma_grid: Vec<f64>,
    pub degree: u32,
    pub offset: f64,
    pub landmarks: usize,
    pub gamma_grid: Vec<f64>,
    pub cca_eps: f64,
    pub lambda_floor: f64,
    pub penalty_scale: f64,
    pub folds: usize,
    pub standardize: bool,
    pub seed: u64,
}

impl PipelineOptions {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        PipelineOptions {
            kernel: cfg.kernel,
            sigma: cfg.sigma,
            sigma_grid: cfg.sigma_grid.clone(),
            degree: cfg.degree,
            offset: cfg.offset,
            landmarks: cfg.landmarks,
            gamma_grid: cfg.gamma_grid.clone(),
            cca_eps: cfg.cca_eps,
            lambda_floor: cfg.lambda_floor,
            penalty_scale: cfg.penalty_scale,
            folds: cfg.folds,
            standardize: cfg.standardize,
            seed,
        }
    }

    fn kernels(&self, x: &DMatrix<f64>, rows: &[usize]) -> Result<Vec<KernelSpec>> {
        let cands = match self.kernel {
            KernelFamily::Gaussian => match self.sigma {
                Some(s) => vec![KernelSpec::Gaussian { bandwidth: s }],
                None => {
                    let mut sample = rows.to_vec();
                    sample.shuffle(&mut substream(self.seed, "bandwidth", &[0]));
                    sample.truncate(500);
                    sample.sort_unstable();
                    let med = median_pairwise_distance(&x.select_rows(&sample));
                    self.sigma_grid.iter().map(|m| KernelSpec::Gaussian { bandwidth: m * med }).collect()
                }
            },
            KernelFamily::Linear => vec![KernelSpec::Linear],
            KernelFamily::Poly => vec![KernelSpec::Polynomial { degree: self.degree, offset: self.offset }],
        };
        for k in &cands {
            k.validate()?;
        }
        Ok(cands)
    }
}

/// Standardization, two Nystrom views and their CCA.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Featurizer {
    pub standardization: Option<Standardization>,
    pub view1: NystromMap,
    pub view2: NystromMap,
    pub cca: CcaModel,
}

impl Featurizer {
    pub fn input_dim(&self) -> usize {
        self.view1.input_dim()
    }

    fn prepare(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.standardization {
            Some(st) => st.apply(x),
            None => Ok(x.clone()),
        }
    }

    /// Raw Nystrom features of both views.
    pub fn views(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = self.prepare(x)?;
        Ok((self.view1.featurize(&x)?, self.view2.featurize(&x)?))
    }

    /// Canonical coordinates of view 1.
    pub fn canonical(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = self.prepare(x)?;
        project_view(&self.cca, &self.view1.featurize(&x)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct XnvPipeline {
    pub version: String,
    pub featurizer: Featurizer,
    pub model: LinearModel,
    pub gamma: f64,
    pub lambda_floor: f64,
}

struct Candidate {
    featurizer: Featurizer,
    zbar: DMatrix<f64>,
}

fn build_candidates(ds: &Dataset, opts: &PipelineOptions) -> Result<Vec<Candidate>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let standardization = if opts.standardize { Some(Standardization::fit(&ds.features, &all)?) } else { None };
    let x = match &standardization {
        Some(st) => st.apply(&ds.features)?,
        None => ds.features.clone(),
    };
    let split = sample_landmarks_from(&all, 2 * opts.landmarks, &mut substream(opts.seed, "landmarks", &[0]))?;
    let lm: Vec<usize> = split.all().collect();
    let inner = InnerProducts::new(&x, &x.select_rows(&lm));
    opts.kernels(&x, &all)?
        .into_iter()
        .map(|kernel| {
            let k_all = inner.kernel(&kernel);
            let (view1, view2, z1, z2) = nystrom_views(&x, &k_all, &split, kernel)?;
            let cv = correlate(z1, z2, &all, opts.cca_eps)?;
            Ok(Candidate {
                featurizer: Featurizer { standardization: standardization.clone(), view1, view2, cca: cv.cca },
                zbar: cv.zbar,
            })
        })
        .collect()
}

/// Fits the featurization on every row of `ds`, labeled or not. Without a
/// fixed bandwidth the median heuristic (first grid entry) is used, since
/// there are no labels to cross-validate against.
pub fn fit_featurizer(ds: &Dataset, opts: &PipelineOptions) -> Result<Featurizer> {
    let mut opts = opts.clone();
    opts.sigma_grid.truncate(1);
    let mut cands = build_candidates(ds, &opts)?;
    Ok(cands.swap_remove(0).featurizer)
}

/// Landmarks and CCA use every row; the regressor and its hyperparameters
/// use the labeled rows.
pub fn fit_pipeline(ds: &Dataset, opts: &PipelineOptions) -> Result<XnvPipeline> {
    let labeled = ds.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::InsufficientData("training needs at least one labeled row".into()));
    }
    let y = ds.labels_of(&labeled)?;
    let cands = build_candidates(ds, opts)?;
    let feats: Vec<DMatrix<f64>> = cands.iter().map(|c| c.zbar.select_rows(&labeled)).collect();
    let grid: Vec<(usize, f64)> = (0..cands.len())
        .flat_map(|k| opts.gamma_grid.iter().map(move |&g| (k, g)))
        .collect();
    let params = |g: f64| XnvParams { lambda_floor: opts.lambda_floor, penalty_scale: opts.penalty_scale, ..XnvParams::new(g) };
    let folds = cv_folds(labeled.len(), opts.folds, &mut substream(opts.seed, "cv", &[0]));
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let (k, gamma) = cv_select(&grid, &folds, |&(k, g), train, held| {
        let corr = &cands[k].featurizer.cca.correlations;
        let m = fit_xnv(&feats[k].select_rows(train), &pick(&y, train), corr, &params(g))?;
        Ok(sse(&predict(&m, &feats[k].select_rows(held))?, &pick(&y, held)))
    })?;
    let featurizer = cands.into_iter().nth(k).expect("candidate index").featurizer;
    let model = fit_xnv(&feats[k], &y, &featurizer.cca.correlations, &params(gamma))?;
    Ok(XnvPipeline {
        version: env!("CARGO_PKG_VERSION").to_string(),
        featurizer,
        model,
        gamma,
        lambda_floor: opts.lambda_floor,
    })
}

impl XnvPipeline {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict(&self.model, &self.featurizer.canonical(x)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read model {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

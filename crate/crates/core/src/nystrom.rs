//! Random views: Nystrom feature maps built from disjoint landmark samples,
//! plus random kitchen sinks as an alternative featurizer.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::kernels::{eigendecompose_psd, gram_matrix, gram_symmetric, KernelSpec};
use crate::rng::{substream, StreamRng};

/// Landmark row indices for the two views; the sets never intersect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSplit {
    pub view1: Vec<usize>,
    pub view2: Vec<usize>,
}

impl LandmarkSplit {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.view1.iter().chain(self.view2.iter()).copied()
    }
}

/// Samples `m_total = 2M` distinct rows out of `n_rows` uniformly without
/// replacement; the first `M` form view 1 and the rest view 2.
pub fn sample_landmarks(n_rows: usize, m_total: usize, seed: u64) -> Result<LandmarkSplit> {
    let pool: Vec<usize> = (0..n_rows).collect();
    let mut rng = substream(seed, "landmarks", &[]);
    sample_landmarks_from(&pool, m_total, &mut rng)
}

/// Same as [`sample_landmarks`] but restricted to the rows listed in `pool`.
pub fn sample_landmarks_from(pool: &[usize], m_total: usize, rng: &mut StreamRng) -> Result<LandmarkSplit> {
    if m_total == 0 || !m_total.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "landmark total must be a positive even number (2M), got {m_total}"
        )));
    }
    if pool.len() < m_total {
        return Err(Error::InsufficientData(format!(
            "need {m_total} rows for landmarks, only {} available",
            pool.len()
        )));
    }
    let picked: Vec<usize> = index::sample(rng, pool.len(), m_total).into_iter().map(|i| pool[i]).collect();
    let m = m_total / 2;
    Ok(LandmarkSplit {
        view1: picked[..m].to_vec(),
        view2: picked[m..].to_vec(),
    })
}

pub(crate) fn select_rows(data: &DMatrix<f64>, rows: &[usize]) -> Result<DMatrix<f64>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= data.nrows()) {
        return Err(Error::InvalidParameter(format!(
            "row index {bad} out of range for {} rows",
            data.nrows()
        )));
    }
    Ok(data.select_rows(rows))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NystromMap {
    /// One landmark per row.
    pub landmarks: DMatrix<f64>,
    /// `D^{-1/2} V^T` over the retained eigenpairs: `rank x M`.
    pub projection: DMatrix<f64>,
    /// Retained eigenvalues of the landmark Gram matrix, nonincreasing.
    pub eigenvalues: Vec<f64>,
    pub kernel: KernelSpec,
}

impl NystromMap {
    pub fn num_landmarks(&self) -> usize {
        self.landmarks.nrows()
    }

    /// Retained feature dimension, at most the number of landmarks.
    pub fn rank(&self) -> usize {
        self.projection.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.landmarks.ncols()
    }

    /// Rows of `x` mapped to `projection * [k(x, l_1), ..., k(x, l_M)]^T`.
    pub fn featurize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("featurize input dimension", self.input_dim(), x.ncols())?;
        let kx = gram_matrix(&self.kernel, x, &self.landmarks)?;
        self.featurize_kernel(&kx)
    }

    /// Featurizes precomputed kernel evaluations against the landmarks
    /// (one row per point, one column per landmark).
    pub fn featurize_kernel(&self, kx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("kernel evaluation columns", self.num_landmarks(), kx.ncols())?;
        Ok(kx * self.projection.transpose())
    }
}

pub fn fit_nystrom_map(
    data: &DMatrix<f64>,
    indices: &[usize],
    kernel: KernelSpec,
    rank_tol: f64,
) -> Result<NystromMap> {
    let landmarks = select_rows(data, indices)?;
    fit_nystrom_landmarks(landmarks, kernel, rank_tol)
}

pub fn fit_nystrom_landmarks(landmarks: DMatrix<f64>, kernel: KernelSpec, rank_tol: f64) -> Result<NystromMap> {
    if landmarks.nrows() == 0 {
        return Err(Error::InvalidParameter("at least one landmark is required".into()));
    }
    let k = gram_symmetric(&kernel, &landmarks)?;
    fit_nystrom_from_gram(landmarks, &k, kernel, rank_tol)
}

/// Like [`fit_nystrom_landmarks`] with the landmark Gram matrix supplied,
/// e.g. sliced from a larger precomputed block.
pub fn fit_nystrom_from_gram(
    landmarks: DMatrix<f64>,
    k: &DMatrix<f64>,
    kernel: KernelSpec,
    rank_tol: f64,
) -> Result<NystromMap> {
    let m = landmarks.nrows();
    if m == 0 {
        return Err(Error::InvalidParameter("at least one landmark is required".into()));
    }
    check_dims("landmark gram size", m, k.nrows())?;
    let eig = eigendecompose_psd(k, rank_tol)?;
    if eig.rank == 0 {
        return Err(Error::Singular("landmark kernel matrix has rank 0".into()));
    }
    let mut projection = DMatrix::zeros(eig.rank, m);
    for (r, &d) in eig.eigenvalues.iter().enumerate() {
        let inv_sqrt = 1.0 / d.sqrt();
        for c in 0..m {
            projection[(r, c)] = eig.eigenvectors[(c, r)] * inv_sqrt;
        }
    }
    Ok(NystromMap {
        landmarks,
        projection,
        eigenvalues: eig.eigenvalues,
        kernel,
    })
}

/// Random Fourier features for the Gaussian kernel: `scale * cos(W x + b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RksMap {
    /// `dim_out x dim_in`, rows drawn from `N(0, I / bandwidth^2)`.
    pub frequencies: DMatrix<f64>,
    /// Uniform on `[0, 2 pi)`.
    pub phases: Vec<f64>,
    /// `sqrt(2 / dim_out)`; bounds every feature magnitude.
    pub scale: f64,
    pub kernel: KernelSpec,
}

pub fn fit_rks_map(dim_in: usize, dim_out: usize, kernel: KernelSpec, seed: u64) -> Result<RksMap> {
    let bandwidth = match kernel {
        KernelSpec::Gaussian { bandwidth } => bandwidth,
        other => {
            return Err(Error::InvalidParameter(format!(
                "random kitchen sinks need a gaussian kernel, got {other:?}"
            )))
        }
    };
    kernel.validate()?;
    if dim_out == 0 || dim_in == 0 {
        return Err(Error::InvalidParameter("rks dimensions must be positive".into()));
    }
    let mut rng = substream(seed, "rks", &[]);
    let frequencies = DMatrix::from_fn(dim_out, dim_in, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z / bandwidth
    });
    let phases = (0..dim_out)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    Ok(RksMap {
        frequencies,
        phases,
        scale: (2.0 / dim_out as f64).sqrt(),
        kernel,
    })
}

impl RksMap {
    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn featurize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("rks input dimension", self.input_dim(), x.ncols())?;
        let mut z = x * self.frequencies.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let b = self.phases[j];
            col.apply(|v| *v = self.scale * (*v + b).cos());
        }
        Ok(z)
    }
}

/// Either featurizer behind one interface, so pipelines can be serialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureMap {
    Nystrom(NystromMap),
    Rks(RksMap),
}

impl FeatureMap {
    pub fn featurize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::Nystrom(m) => m.featurize(x),
            FeatureMap::Rks(m) => m.featurize(x),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Nystrom(m) => m.rank(),
            FeatureMap::Rks(m) => m.dim_out(),
        }
    }
}

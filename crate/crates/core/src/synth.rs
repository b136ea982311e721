//! Synthetic regression task where two random kernel views are both
//! predictive: a low-dimensional Gaussian latent drives every observed column
//! through a smooth nonlinearity, and the label is linear in the latent.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTask {
    pub latent_dim: usize,
    pub observed_dim: usize,
    /// Std of the independent Gaussian noise added to every observed column.
    pub feature_noise: f64,
    /// Scale of the mixing matrix inside `tanh`.
    pub mixing_scale: f64,
    pub label_noise: f64,
    /// Seed of the fixed mixing matrix, offsets and label direction.
    pub structure_seed: u64,
}

impl Default for LatentTask {
    fn default() -> Self {
        LatentTask {
            latent_dim: 5,
            observed_dim: 500,
            feature_noise: 2.0,
            mixing_scale: 2.0,
            label_noise: 0.1,
            structure_seed: 123,
        }
    }
}

struct Structure {
    mixing: DMatrix<f64>,
    offsets: Vec<f64>,
    beta: Vec<f64>,
}

impl LatentTask {
    fn structure(&self) -> Structure {
        let mut rng = substream(self.structure_seed, "synth-structure", &[]);
        let (k, d) = (self.latent_dim, self.observed_dim);
        let scale = self.mixing_scale / (k as f64).sqrt();
        let mixing = DMatrix::from_fn(d, k, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let unit = Uniform::new(-1.0, 1.0).expect("valid range");
        let offsets = (0..d).map(|_| unit.sample(&mut rng)).collect();
        let mut beta: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        beta.iter_mut().for_each(|b| *b /= norm);
        Structure { mixing, offsets, beta }
    }

    /// `n` fully labeled rows `x = tanh(A t + b) + noise`, `y = <beta, t> + noise`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if self.latent_dim == 0 || self.observed_dim == 0 {
            return Err(Error::InvalidParameter("latent and observed dimensions must be positive".into()));
        }
        if !(self.feature_noise >= 0.0 && self.label_noise >= 0.0) {
            return Err(Error::InvalidParameter("noise levels must be nonnegative".into()));
        }
        let s = self.structure();
        let mut rng = substream(seed, "synth-rows", &[]);
        let (k, d) = (self.latent_dim, self.observed_dim);
        let mut features = DMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut t = vec![0.0; k];
        for i in 0..n {
            t.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for j in 0..d {
                let drive: f64 = (0..k).map(|c| s.mixing[(j, c)] * t[c]).sum::<f64>() + s.offsets[j];
                let noise: f64 = rng.sample(StandardNormal);
                features[(i, j)] = drive.tanh() + self.feature_noise * noise;
            }
            let noise: f64 = rng.sample(StandardNormal);
            let y = t.iter().zip(&s.beta).map(|(a, b)| a * b).sum::<f64>() + self.label_noise * noise;
            labels.push(Some(y));
        }
        let mut ds = Dataset::new("latent", features, labels)?;
        ds.name = format!("latent-d{}", d);
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let task = LatentTask { observed_dim: 8, ..LatentTask::default() };
        let a = task.generate(20, 1).unwrap();
        assert_eq!(a, task.generate(20, 1).unwrap());
        assert_ne!(a.features, task.generate(20, 2).unwrap().features);
        assert_eq!(a.labeled_indices().len(), 20);
    }

    #[test]
    fn noiseless_features_are_bounded() {
        let task = LatentTask { observed_dim: 6, feature_noise: 0.0, ..LatentTask::default() };
        let ds = task.generate(50, 3).unwrap();
        assert!(ds.features.iter().all(|v| v.abs() < 1.0));
    }
}

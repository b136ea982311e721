//! Shared fixtures for the criterion benchmarks.

use nalgebra::DMatrix;
use xnv_core::synth::LatentTask;

/// Standardized features and labels from the default latent task.
pub fn latent_fixture(n: usize, dim: usize) -> (DMatrix<f64>, Vec<f64>) {
    let task = LatentTask { observed_dim: dim, ..LatentTask::default() };
    let mut ds = task.generate(n, 7).expect("fixture generation");
    let rows: Vec<usize> = (0..n).collect();
    ds.standardize(&rows).expect("standardize");
    let y = ds.labels_of(&rows).expect("labels");
    (ds.features, y)
}

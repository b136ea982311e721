//! Semi-supervised kernel regression with correlated Nystrom views.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cca;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod nystrom;
pub mod pipeline;
pub mod regressors;
pub mod rng;
pub mod selectron;
pub mod synth;

pub use error::{Error, Result};
pub use experiment::{Algorithm, ExperimentConfig, KernelFamily, Report, ReportFormat};
pub use kernels::KernelSpec;
pub use nystrom::NystromMap;
pub use cca::CcaModel;
pub use dataset::{DataFormat, Dataset};
pub use pipeline::XnvPipeline;
pub use regressors::{CorlsModel, LinearModel};
pub use selectron::{Scenario, SelectronState};

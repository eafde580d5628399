//! Mean-field training of single-hidden-layer networks as a sequence of
//! entropic Wasserstein proximal steps over a weighted point cloud.
//!
//! Each step moves the samples with a nonlocal Euler–Maruyama update
//! ([`dynamics`], driven by [`grad`]) and then updates their weights by a
//! Sinkhorn-type fixed point ([`prox`]). [`trainer`] strings the steps together.

pub mod cloud;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod grad;
pub mod model;
pub mod prox;
pub mod trainer;

pub use cloud::{init_cloud, init_cloud_with, load_cloud, save_cloud, BoxSegment, InitSpec, ParticleCloud, WeightInit};
pub use data::{Dataset, SplitMode, SplitSpec, TabularSchema};
pub use dynamics::EmConfig;
pub use error::{Error, Result};
pub use grad::GradBlocks;
pub use model::{EstimateMode, Labels, ModelSpec, PotentialEval, Variant};
pub use prox::{Kernel, ProxDiagnostics, ProxInputs};
pub use trainer::{DatasetSource, MetricsRow, ProxConfig, StepConfig};

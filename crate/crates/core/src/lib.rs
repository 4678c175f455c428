//! Unlearnable-example generation and evaluation.

pub mod cli;
pub mod datastore;
pub mod diff;
pub mod error;
pub mod evaluate;
pub mod models;
pub mod noisegen;
pub mod perturb;
pub mod robustness;
pub mod sampler;
pub mod scalar;
pub mod seed;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diff::Tensor<f32>;
pub type Tensor64 = diff::Tensor<f64>;
pub type ModelState32 = models::ModelState<f32>;
pub type ModelState64 = models::ModelState<f64>;
pub type DatasetSplit32 = datastore::DatasetSplit<f32>;
pub type DatasetSplit64 = datastore::DatasetSplit<f64>;
pub type NoiseBank32 = noisegen::NoiseBank<f32>;
pub type NoiseBank64 = noisegen::NoiseBank<f64>;

//! Few-shot segmentation with prototype transfer and a denoising surrogate
//! task on unlabeled images.

pub mod config;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod objectives;
pub mod raster;
pub mod seed;
pub mod surrogate;
pub mod trainer;

pub use config::{RunConfig, TrainMode};
pub use error::{Error, Result};
pub use network::{Fusion, Model, ModelConfig};
pub use raster::{BinaryMask, Image, ProbabilityMask};

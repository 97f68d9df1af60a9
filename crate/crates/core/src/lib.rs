//! Dual divergence estimation, dual-space clustering and gradient-walk
//! sampling for small image-shaped data sets.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod clustering;
pub mod data;
pub mod ddm;
pub mod diffusion;
pub mod divergence;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Images = image::ImageSet<f64>;
pub type Model = model::DualFunctionModel<f64>;
pub type Offsets = divergence::NormalizedDualOffsets<f64>;
pub type Profile = clustering::DualProfile<f64>;
pub type Config = trainer::TrainConfig<f64>;
pub type Walk = sampler::WalkConfig<f64>;
pub type Trained = trainer::TrainResult<f64>;
pub type Samples = sampler::SampleOutcome<f64>;

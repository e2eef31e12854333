//! Coarse-to-fine multimodal deformable registration in which frozen
//! pretrained transformer layers, adapted with LoRA, encode the coarsest
//! image features.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod ablation;
pub mod archive;
pub mod autograd;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod leb;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use volume::{DisplacementField, LabelMap, Volume};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Field32 = DisplacementField<f32>;
pub type Field64 = DisplacementField<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

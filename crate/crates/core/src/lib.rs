//! Structure-guided low-light image enhancement.
//!
//! The pipeline has three trainable parts plus a discriminator:
//!
//! * [`appearance`]: a U-Net restoring an initial image from the dark input;
//! * [`structure`]: an edge-map generator built from a structure-aware feature
//!   extractor (content plus eight directional gradient branches) and a
//!   style-based generator, trained with BCE and adversarial losses;
//! * [`sgem`]: a second U-Net whose decoder features are filtered by per-pixel
//!   kernels and re-normalized by maps, both synthesized from the edge map,
//!   producing a residual over the initial image.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autograd`]) over
//! `f64` tensors.

pub mod appearance;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imaging;
mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sgem;
pub mod structure;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use kernels::DIRECTION_OFFSETS;
pub use tensor::Tensor;

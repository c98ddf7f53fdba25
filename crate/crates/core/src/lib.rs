//! One-step adversarial distillation for super-resolution at toy scale.

pub mod autodiff;
pub mod config;
pub mod degrade;
pub mod error;
pub mod flowcore;
pub mod image;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use autodiff::nn::ConvGeom;
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;

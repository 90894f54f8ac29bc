//! Self-supervised ViT condition encoders with attention-keypoint local
//! crops, and a toy latent-diffusion inpainting pipeline for garment try-on.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod hash;
pub mod image;
pub mod keypoints;
pub mod metrics;
pub mod optim;
pub mod ssl;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};

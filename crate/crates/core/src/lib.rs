//! Aligned real/fake dataset construction, patch detector training and
//! robustness evaluation for latent-diffusion fake-image forensics.

pub mod accounting;
pub mod augmentation;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod imaging;
pub mod manifest;
pub mod nn;
pub mod reconstruction;
pub mod robustness;
pub mod seed;
pub mod textures;

pub use error::{Error, Result};

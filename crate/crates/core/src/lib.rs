//! Learning and evaluating a paired ear-to-face image mapping.
//!
//! A U-Net generator maps ear images to face images and is trained against
//! a patch discriminator under an adversarial + L1 + feature + style
//! objective, where the feature and style terms use a frozen embedding
//! network. Evaluation covers pixel/feature/style differences, PSNR, SSIM
//! and CMC identification of reconstructed faces against real galleries.

pub mod checkpoint;
pub mod dataset;
pub mod embedding_plugin;
pub mod error;
pub mod harness;
pub mod identification;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod trainer;

pub use error::{Error, Result};

//! Through-plane MRI slice interpolation.
//!
//! Given two slices of a volume separated by a gap of `2k` slice positions,
//! predict the slice in the middle. The crate bundles a small reverse-mode
//! autodiff engine, five network architectures (EDSR-style CNN, U-Net, basic
//! and improved GAN, conditional DDPM), the linear and nearest-neighbour
//! baselines, PSNR/SSIM evaluation, synthetic phantom volumes and the
//! experiment CLI.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

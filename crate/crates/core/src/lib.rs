//! Model Specialization Metric (MSM): label-free no-reference image quality
//! assessment.
//!
//! A restoration backbone `M` is trained to reproduce clean images. Because
//! the network is specialized to clean inputs, the discrepancy between an
//! input `I` and its prediction `M(I)` grows as `I` degrades, and serves as a
//! quality score that needs no reference image and no quality labels.
//!
//! Modules:
//! - [`imaging`]: [`ImageGrid`], PNG / raw-float I/O, synthetic phantoms.
//! - [`distort`]: Gaussian / Rician noise, Gaussian / motion blur, synthetic
//!   sodium images, distortion ladders.
//! - [`diffusion`]: linear-schedule DDPM used to generate content-dependent
//!   noisy images indexed by the reverse-process stop step.
//! - [`backbone`]: identity-trained U-net and windowed-attention backbones.
//! - [`metrics`]: MSM scores, L1/L2/PSNR/SSIM, PLCC, SRCC, Cohen's kappa.
//! - [`denoise`]: median filter and learned denoisers used as rated variants.
//! - [`harness`]: experiment runners, pairwise rating sessions and the rating
//!   HTTP service.

pub mod backbone;
pub mod denoise;
pub mod diffusion;
pub mod distort;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod rng;

pub use error::{MsmError, Result};
pub use imaging::ImageGrid;

//! Alternating segmentation/denoising cascades on a small autodiff engine.
//!
//! A cascade is a chain of blocks. Each block runs a segmentation network on
//! its input image, turns the logits into a per-pixel class distribution and
//! uses that distribution to modulate the features of a residual denoiser
//! through spatial feature transform (SFT) layers. Block `i > 1` segments the
//! previous block's denoised image and denoises it with a skip connection to
//! the original noisy input. Blocks are trained one stage at a time, with all
//! earlier stages frozen.
//!
//! Module map:
//!
//! - [`tensor`]: tensors, the reverse-mode tape and gradient checking
//! - [`noise`]: Gaussian and Poisson corruption with per-sample seeds
//! - [`models`]: SFT, the segmentation network, the denoisers and blocks
//! - [`cascade`]: composition of blocks and the ablation variants
//! - [`data`]: synthetic shape dataset, PNG I/O and manifests
//! - [`metrics`]: PSNR, SSIM and confusion-matrix segmentation scores
//! - [`train`]: optimizers, checkpoints and stage-wise training
//! - [`harness`]: experiment configuration and the generate/train/eval/report commands

pub mod cascade;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tape, Tensor, Var};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

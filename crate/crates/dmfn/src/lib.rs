//! Dense multi-scale fusion network (DMFN) for one-stage image inpainting.
//!
//! The crate bundles everything needed to train and run the model at desk
//! scale: the fusion generator with its ablation variants, the two-branch
//! relativistic critic, the frozen VGG19 feature taps, the six-term training
//! objective, mask/data tooling, a deterministic trainer with resumable
//! checkpoints, and PSNR/SSIM/LPIPS evaluation.
//!
//! Compute kernels live in [`kernels`] and are data-parallel over rayon by
//! default; build with `--no-default-features` for the sequential fallback.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod kernels;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod types;
pub mod vgg;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::{ImageBatch, LossWeights, Mask, RangeTag, TrainConfig};

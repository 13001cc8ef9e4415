//! Cross-conditioned diffusion model (CDM) for paired multi-modal image
//! translation, at desk scale.
//!
//! The model has three trained parts:
//! - a masked-patch representation model ([`mrm`]) whose encoder produces a
//!   compact latent summarizing the target modalities,
//! - a lightweight vector diffusion network ([`mdn`]) that models that latent
//!   and samples it with deterministic DDIM steps ([`schedules`]),
//! - a cross-conditioned UNet ([`cunet`]) that translates source-modality
//!   images into target-modality images under the sampled latent's guidance.
//!
//! [`data`] provides a deterministic synthetic phantom dataset, [`metrics`]
//! the PSNR/SSIM/MAE evaluation triplet, and [`pipeline`] the three-stage
//! training orchestration, checkpointing, and the sampling benchmark.

pub mod config;
pub mod cunet;
pub mod data;
pub mod error;
pub mod grad_check;
pub mod image;
pub mod mdn;
pub mod metrics;
pub mod mrm;
pub mod nn;
pub mod pipeline;
pub mod schedules;

pub use error::{CdmError, Result};
pub use image::ImageBatch;

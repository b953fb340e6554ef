//! Conditional 3D brain-phantom synthesis with a latent diffusion pipeline.
//!
//! The crate covers the full desk-scale workflow:
//!
//! * [`phantom`] — procedurally generated head phantoms with analytically
//!   known ventricular and brain volumes, plus validated volume ingestion.
//! * [`compressor`] — a KL-regularized compression autoencoder (L1 +
//!   perceptual + patch-adversarial + KL losses) mapping volumes to latents.
//! * [`diffusion`] — a DDPM over latents with a fixed linear variance
//!   schedule, hybrid conditioning (channel concatenation + cross-attention),
//!   and both ancestral (DDPM) and accelerated (DDIM) samplers.
//! * [`metrics`] — FID over pluggable feature extractors, MS-SSIM and
//!   4-G-R-SSIM with the sample-pair diversity protocol.
//! * [`conditioning`] — conditioning-fidelity evaluation: volume and age
//!   correlation sweeps and out-of-range extrapolation.
//! * [`pipeline`] — configuration, orchestration, persistence and dataset
//!   packaging behind the `brainsynth` CLI.

pub mod checkpoint;
pub mod compressor;
pub mod conditioning;
pub mod covariates;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod util;
pub mod volume;

pub use error::{Error, Result};

//! Class-imbalanced diffusion training with contrastive regularizers.
//!
//! A small, self-contained laboratory: a DDPM noise estimator with an
//! explicit encoder/decoder split, a negatives-only InfoNCE loss on the
//! encoder latents, a timestep-weighted alignment loss between conditional
//! and unconditional noise estimates, DDPM/DDIM samplers with
//! classifier-free guidance, long-tailed synthetic datasets, and the
//! metrics used to compare models on them.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

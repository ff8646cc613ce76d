//! Label-guided 3D latent diffusion for paired (label map, volume) synthesis.
//!
//! The crate covers the whole workflow: procedural liver phantoms and their
//! on-disk dataset format, the volume and label variational autoencoders,
//! DDPM machinery in latent space, a ControlNet-style conditional denoiser,
//! the staged training / two-stage sampling pipeline, Fréchet-distance and
//! Dice evaluation, and a segmentation harness that measures the value of
//! synthetic pairs as training augmentation.

pub mod autoencoder;
pub mod controlnet;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod segment;
pub mod train;

pub use error::{Error, Result};

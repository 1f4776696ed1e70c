//! Hyperbolic multimodal generative representation learning for generalized
//! zero-shot multimodal information extraction.
//!
//! The crate works on precomputed token/patch embedding bundles:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, optimizers, seeded RNG
//! - [`lorentz`]: Lorentz-model maps and the Lorentz linear layer
//! - [`hvib`]: hyperbolic variational information bottleneck losses
//! - [`fusion`]: entity representations, cross-modal attention, prototype scoring
//! - [`hmcvae`]: prototype-conditioned VAE and unseen-category synthesis
//! - [`data`]: bundle format, GZSL split protocol, synthetic corpus generator
//! - [`engine`]: combined objective, training, calibrated inference, metrics

pub mod data;
pub mod engine;
pub mod fusion;
pub mod hmcvae;
pub mod hvib;
pub mod lorentz;
pub mod numerics;

pub use numerics::{NumericsError, Tensor};

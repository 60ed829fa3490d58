//! Two-stage hierarchical VQ-VAE.
//!
//! Stage 1 ([`codec`]) learns a hierarchy of discrete latent grids with vector
//! quantization ([`vq`]). Stage 2 ([`prior`]) fits gated masked-convolution
//! priors with causal self-attention over the extracted grids and samples new
//! images ancestrally, optionally filtered by a classifier ([`rejection`]).
//! [`pipeline`] wires the stages together with dataset I/O and checkpoints.
//!
//! All numerics run on the small reverse-mode differentiation engine in
//! [`autodiff`], in `f64`.

pub mod autodiff;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod prior;
pub mod rejection;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;

//! Pseudo-prompt generation for multi-label zero-shot image classification.
//!
//! An autoregressive prompt decoder turns class text features and a batch of
//! image features into per-class positive/negative embedding sequences. These
//! are fed to a text encoder through its embedding-bypass entry point and
//! scored against spatially fused image features. Everything runs on a small
//! reverse-mode autodiff engine ([`tensor`]).

pub mod error;
pub mod rng;
pub mod tensor;
pub mod params;
pub mod nn;
pub mod backbone;
pub mod fusion;
pub mod decoder;
pub mod objectives;
pub mod classifier;
pub mod model;
pub mod metrics;
pub mod synth;
pub mod train;
pub mod experiments;
pub mod gradcheck;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};

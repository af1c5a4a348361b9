//! Global concept activation vectors on a synthetic probe stack.
//!
//! Per-layer CAVs are compressed by layer autoencoders, aligned across
//! layers by a contrastive projection head, and fused by a small attention
//! block into one vector per concept whose per-layer decodes drive TGCAV
//! scores.

pub mod align;
pub mod attack;
pub mod autodiff;
pub mod autoencoder;
pub mod cav;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod tensor;

pub use autodiff::{Adam, AdamConfig, Graph, ParamStore, Var};
pub use error::{GcavError, Result};
pub use rng::SeedStreams;
pub use tensor::{Element, Tensor, TensorError};

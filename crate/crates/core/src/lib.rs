//! Learnable temporal patch blending for video transformers.
//!
//! The crate bundles a small reverse-mode autograd engine, the PatchBlender
//! layer, a toy video ViT, synthetic motion datasets and a training harness.

pub mod autograd;
pub mod blend;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use blend::{BlendMatrix, BlendVariant, LatentClip, PermutationMap};
pub use error::{Error, Result};
pub use model::{HeadKind, ModelConfig, VideoViT};
pub use tensor::Tensor;

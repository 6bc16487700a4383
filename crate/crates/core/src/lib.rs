//! Linear-complexity multimodal fusion: a small reverse-mode tensor core,
//! selective state-space layers, the cross-modal and self-attention blocks
//! built on them, and the training and evaluation harness.

pub mod bench;
pub mod checkpoint;
pub mod cmm;
pub mod config;
pub mod data;
pub mod emf;
pub mod error;
pub mod flops;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod sam;
pub mod scan;
pub mod sdmae;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod weighter;

pub use error::{Error, Result};
pub use param::{Builder, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

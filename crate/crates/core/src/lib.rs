//! Latency-aware structural pruning of vision transformers.
//!
//! The crate covers a small tensor/autodiff core, a DEIT-style ViT with
//! maskable prunable axes, distillation losses, a block latency lookup table,
//! Taylor group importance, the iterative pruner, 2:4 sparsification, the
//! architecture generator derived from pruning trends, and training plumbing.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod events;
pub mod importance;
pub mod loss;
pub mod lut;
pub mod model;
pub mod nvit;
pub mod optim;
pub mod pruner;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Attention-based multiscale temporal fusion network for fault diagnosis in
//! multimode processes, built on a small reverse-mode autodiff engine.
//!
//! Layout:
//! - [`tensor`]: dense tensors, the gradient tape and the finite-difference checker
//! - [`layers`]: depthwise/standard 1-D convolution, instance norm, GRU, linear, dropout
//! - [`model`]: the network, its ablation variants, parameter counting, checkpoints
//! - [`data`]: CSV ingestion, z-scoring, sliding windows, stratified splits, synthetic plant
//! - [`train`]: cross-entropy training with step-decayed learning rate, evaluation, feature export
//! - [`metrics`]: confusion matrix, Micro/Macro-F1, FDR and FPR
//! - [`diagnostics`]: the gradient-check suite run by the CLI

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

//! Learns a projection from a frozen text-embedding space into a frozen
//! vision backbone's patch-embedding space, and uses it for open-vocabulary
//! semantic segmentation over precomputed backbone tensors.
//!
//! Modules, bottom-up:
//!
//! - [`tensor_store`]: the `.t2d` binary tensor container.
//! - [`math`]: cosine, softmaxes, bilinear upsampling, remapping, argmax.
//! - [`projection`]: the tanh-MLP text-to-visual warp with analytic backprop.
//! - [`sample`]: per-image feature/attention/caption containers.
//! - [`trainer`]: head pooling, max-head selection, symmetric InfoNCE, Adam.
//! - [`engine`]: similarity maps, background cleaning, sliding windows, masks.
//! - [`refine`]: pixel-adaptive mask refinement.
//! - [`eval`]: confusion matrices, mIoU and the benchmark runner.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod math;
pub mod projection;
pub mod refine;
pub mod sample;
pub mod synthetic;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, Result};

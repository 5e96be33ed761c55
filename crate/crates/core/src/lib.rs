//! Multi-task contrastive vision-language pretraining at desk scale.
//!
//! Everything needed to train tiny dual encoders on synthetic image-caption
//! pairs with noisy dense pseudo-labels, and to measure the learned
//! representations through frozen-backbone probes, zero-shot classification,
//! and retrieval:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//! - [`model`]: image/text encoders, shared multi-scale module, task heads
//! - [`loss`]: contrastive, dense pseudo-label, and probing objectives
//! - [`synth`]: procedural scene generator and the expert-noise oracle
//! - [`train`]: schedules, AdamW, pretraining and probe loops
//! - [`metrics`]: mIoU, abs-rel, angular accuracy, top-1, recall@k
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats and the
//! CLI live in the companion `mtcx-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("mtcx-core requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod error;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::{Graph, TensorId};

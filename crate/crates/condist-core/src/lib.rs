//! Core mathematics for a desk-scale federated segmentation simulator.
//!
//! This crate is `no_std` (with `alloc`) and carries no IO: tensors with
//! reverse-mode autodiff, the marginal / conditional-distillation loss stack,
//! a small encoder-decoder segmentation network, synthetic partially
//! annotated datasets, server aggregation rules, and Dice evaluation.
//! File formats are exposed as byte codecs; reading and writing files, the
//! CLI, and the multi-threaded round orchestrator live in the companion
//! `condist-fl` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor};

//! Core library for a deformable sequence transformer: a dense-tensor tape
//! autodiff engine, four self-attention mechanisms (full, fixed-window,
//! offset-sampling, and deformable-window with differentiable boundary
//! weighting), the stacked encoder/classifier model, evaluation metrics, a
//! synthetic planted-cue dataset generator, and the SGD training loop.
//!
//! The crate is no_std-compatible (alloc required): build with
//! `--no-default-features` for no_std targets. The default `std` feature
//! only enables runtime CPU-feature dispatch in the matmul backend and does
//! not change any result observable at the API level beyond last-ulp
//! differences in transcendental functions.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod num;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

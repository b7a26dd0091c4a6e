//! Numeric core of a federated adversarial learning simulator built around
//! scale-and-shift (SSF) parameter-efficient fine-tuning.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is a pure
//! function of its inputs and seeds: reverse-mode autodiff over dense
//! tensors, normalization layers, the frozen-backbone SSF model with its
//! reparameterization merge, gradient-sign attacks, federated local updates
//! and aggregation, synthetic data, and the binary array container used for
//! payloads and checkpoints. File IO, configuration and the CLI live in the
//! `fedssf` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attack;
pub mod container;
pub mod data;
pub mod experiment;
pub mod fed;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod norm;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use tape::{StatAxes, Tape, Var};
pub use tensor::Tensor;

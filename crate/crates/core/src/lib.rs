//! Core of the FCCDN change-detection stack.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! small reverse-mode autodiff engine, the network building blocks, the
//! dual encoder-decoder assembly, the loss functions (including the
//! self-supervised pseudolabel constraint), metrics, data transforms, the
//! optimizer and learning-rate schedule, and the inference routines.
//!
//! The crate is `no_std` with `alloc`. The default `std` feature only turns
//! on runtime CPU feature detection in the matrix-multiply kernels; file
//! formats, the CLI and anything else touching the OS live in the `fccdn`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{ClassMap, Real, Shape, Tensor};
pub use network::{ModelOutputs, Network, NetworkConfig};

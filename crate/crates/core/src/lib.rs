//! Crowd counting with count-map labels and a region relation-aware module.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure computation:
//!
//! * [`tensor`]: a small reverse-mode differentiation engine for the handful of
//!   operators the counting network uses, plus a finite-difference checker.
//! * [`data`]: point annotations, deterministic synthetic crowd scenes and the
//!   crop-and-flip augmentation.
//! * [`labeling`]: location maps, count maps (sum pooling with stride `r/2`),
//!   the Gaussian density baseline and per-cell class targets.
//! * [`rram`]: attention maps, weighted global pooling, the learnable-graph GCN
//!   and broadcast fusion.
//! * [`model`]: backbone, heads and parameter initialization.
//! * [`training`]: losses, SGD with weight decay and the training loop.
//! * [`evaluation`]: count estimation, MAE/MSE and heatmap rendering.
//!
//! File formats, configuration and the command line live in the `rrp` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod labeling;
pub(crate) mod math;
pub mod model;
pub mod rng;
pub mod rram;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

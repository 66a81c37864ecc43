//! Numerical core of the NTH laboratory.
//!
//! A finite-width residual network with `1/(L√m)`-scaled skip branches, its
//! exact gradient-flow dynamics, the empirical neural tangent kernel with its
//! per-layer split, the explicit third-order hierarchy kernel, and the
//! infinite-width Gram matrices obtained by Gaussian quadrature.
//!
//! The crate is `no_std` (it needs `alloc`). Enabling the `std` feature only
//! swaps the scalar math routines for the platform ones.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod dd;
pub mod dynamics;
pub mod error;
pub mod kernel;
pub mod limitgram;
pub mod linalg;
pub mod math;
pub mod model;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use model::{Activation, Dataset, ForwardCache, NetworkConfig, Params};
pub use rng::GaussianRng;

//! Dynamic linear flows for exact-likelihood density estimation.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` arrays and a reverse-mode tape.
//! - [`layers`] and [`coupling`]: the invertible building blocks (actnorm,
//!   invertible 1×1 convolution, K-partition dynamic linear transformation,
//!   squeeze, split) and the per-partition networks that drive them.
//! - [`model`]: the multi-scale stack with encode/decode, likelihood,
//!   temperature sampling and latent interpolation.
//! - [`optim`], [`data`] and [`train`]: Adam with warmup, toy datasets,
//!   dequantization and a callback-driven training loop.
//! - [`verify`]: brute-force oracles (numeric Jacobians, finite-difference
//!   gradients, round trips) that never touch the analytic log-determinant
//!   code they check.
//!
//! File formats, the CLI and anything touching the filesystem live in the
//! `dlf` crate.
//!
//! ```
//! use dlf_core::model::{Model, ModelConfig};
//! use dlf_core::tensor::Tensor;
//!
//! let cfg = ModelConfig::flat(4, 2).with_steps(2).with_hidden(8);
//! let model = Model::new(cfg).unwrap();
//! let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1 - 0.5);
//! let z = model.encode(&x, None).unwrap();
//! let back = model.decode(&z, None).unwrap();
//! assert!(back.max_abs_diff(&x) < 1e-9);
//! ```
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod coupling;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

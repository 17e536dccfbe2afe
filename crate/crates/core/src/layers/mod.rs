//! Invertible layers. Each exposes a forward map returning the output and
//! a per-sample log-determinant of shape `[N]`, and an exact inverse.
//!
//! Layers operate on NHWC graph values; flat vectors are carried as
//! `[N, 1, 1, D]`.

pub mod actnorm;
pub mod dynlin;
pub mod inv1x1;
pub mod squeeze;

pub use actnorm::ActNorm;
pub use dynlin::{DynLin, DynLinConfig, Variant};
pub use inv1x1::Inv1x1;
pub use squeeze::{merge, prior_log_density, split_out, squeeze, unsqueeze};

use alloc::vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Broadcasts a one-element log-determinant to one entry per sample.
pub(crate) fn per_sample(g: &mut Graph, logdet: Var, n: usize) -> Result<Var> {
    if g.shape(logdet) == [n] {
        return Ok(logdet);
    }
    let zeros = g.constant(Tensor::new(&[n], vec![0.0; n])?);
    g.add(zeros, logdet)
}

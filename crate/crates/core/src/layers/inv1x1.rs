//! Invertible 1×1 convolution: one c×c matrix applied at every position.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Lu};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::rng::FlowRng;
use crate::tensor::Tensor;

use super::per_sample;

#[derive(Debug, Clone, PartialEq)]
pub struct Inv1x1 {
    name: String,
    channels: usize,
    weight: ParamId,
}

impl Inv1x1 {
    /// Registers a random orthogonal weight, so the layer starts with a
    /// log-determinant of zero.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut FlowRng) -> Self {
        let w = random_orthogonal(channels, rng);
        Inv1x1 {
            name: name.into(),
            channels,
            weight: store.add(format!("{name}.weight"), w, ParamKind::Inv1x1Weight),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    fn factor(&self, w: &Tensor) -> Result<Lu> {
        let lu = Lu::factor(w)?;
        if lu.is_singular() {
            return Err(Error::domain(
                "inv1x1",
                format!("{}: weight is singular (|det W| = {:e})", self.name, lu.det().abs()),
            ));
        }
        Ok(lu)
    }

    /// `y = W·x` at every position; log-det `H·W·log|det W|`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let w = bound.var(self.weight);
        self.factor(g.value(w))?;
        let shape = g.shape(x).to_vec();
        if shape[3] != self.channels {
            return Err(Error::contract("inv1x1", format!("{}: input {shape:?}", self.name)));
        }
        let y = g.linear(x, w)?;
        let lad = g.log_abs_det(w)?;
        let ld = g.scale(lad, (shape[1] * shape[2]) as f64);
        let ld = per_sample(g, ld, shape[0])?;
        Ok((y, ld))
    }

    /// `x = W⁻¹·y` per position by LU solve.
    pub fn inverse(&self, g: &mut Graph, bound: &Bound, y: Var) -> Result<Var> {
        let lu = self.factor(g.value(bound.var(self.weight)))?;
        let x = solve_rows(&lu, g.value(y));
        Ok(g.constant(x))
    }
}

fn solve_rows(lu: &Lu, y: &Tensor) -> Tensor {
    let c = y.channels();
    let mut out: Vec<f64> = y.data().to_vec();
    for row in out.chunks_mut(c) {
        lu.solve_in_place(row);
    }
    Tensor::new(y.shape(), out).expect("same shape")
}

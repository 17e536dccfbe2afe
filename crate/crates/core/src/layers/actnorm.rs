//! Per-channel affine map with scale and bias shared across positions.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

use super::per_sample;

#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    name: String,
    channels: usize,
    scale: ParamId,
    bias: ParamId,
    initialized: bool,
}

impl ActNorm {
    /// Registers `s = 1`, `μ = 0`. With `data_init` the first batch passed
    /// to [`ActNorm::initialize`] overwrites them.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, data_init: bool) -> Self {
        ActNorm {
            name: name.into(),
            channels,
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels]), ParamKind::Other),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::Other),
            initialized: !data_init,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn scale(&self) -> ParamId {
        self.scale
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Keeps the stored values, e.g. after loading trained parameters.
    pub fn set_initialized(&mut self) {
        self.initialized = true;
    }

    /// Sets `s`, `μ` so that `x` maps to zero mean and unit variance per
    /// channel.
    pub fn initialize(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        let c = self.channels;
        if x.channels() != c {
            return Err(Error::contract("actnorm", format!("{}: expected {c} channels", self.name)));
        }
        let rows = x.len() / c;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let scale: alloc::vec::Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + 1e-12)).collect();
        let bias: alloc::vec::Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        *store.get_mut(self.scale) = Tensor::new(&[c], scale)?;
        *store.get_mut(self.bias) = Tensor::new(&[c], bias)?;
        self.initialized = true;
        Ok(())
    }

    fn check_scale(&self, g: &Graph, bound: &Bound) -> Result<()> {
        if g.value(bound.var(self.scale)).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("actnorm", format!("{}: zero scale", self.name)));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_scale(g, bound)?;
        let shape = g.shape(x).to_vec();
        let s = bound.var(self.scale);
        let y = g.mul(x, s)?;
        let y = g.add(y, bound.var(self.bias))?;
        let abs = g.abs(s)?;
        let log = g.log(abs)?;
        let total = g.sum(log);
        let ld = g.scale(total, (shape[1] * shape[2]) as f64);
        let ld = per_sample(g, ld, shape[0])?;
        Ok((y, ld))
    }

    pub fn inverse(&self, g: &mut Graph, bound: &Bound, y: Var) -> Result<Var> {
        self.check_scale(g, bound)?;
        let centered = g.sub(y, bound.var(self.bias))?;
        g.div(centered, bound.var(self.scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(store: &ParamStore, layer: &ActNorm, x: Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let xv = g.constant(x);
        let (y, ld) = layer.forward(&mut g, &b, xv).unwrap();
        (g.value(y).clone(), g.value(ld).clone())
    }

    #[test]
    fn identity_parameters() {
        let mut store = ParamStore::new();
        let layer = ActNorm::new(&mut store, "an", 2, false);
        let x = Tensor::from_fn(&[2, 3, 3, 2], |i| i as f64 - 7.0);
        let (y, ld) = run(&store, &layer, x.clone());
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn doubling_scale_logdet() {
        let mut store = ParamStore::new();
        let layer = ActNorm::new(&mut store, "an", 2, false);
        store.set("an.scale", Tensor::full(&[2], 2.0)).unwrap();
        let (_, ld) = run(&store, &layer, Tensor::ones(&[1, 3, 3, 2]));
        assert!((ld.item() - 9.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld.item() - 12.477).abs() < 1e-3);
    }

    #[test]
    fn data_dependent_init_normalizes() {
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 3, true);
        assert!(!layer.is_initialized());
        let x = Tensor::from_fn(&[4, 2, 2, 3], |i| ((i * 7919) % 31) as f64 * 0.3 + (i % 3) as f64 * 5.0);
        layer.initialize(&mut store, &x).unwrap();
        assert!(layer.is_initialized());
        let (y, _) = run(&store, &layer, x);
        let rows = y.len() / 3;
        for c in 0..3 {
            let vals: alloc::vec::Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / rows as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn zero_scale_is_domain_error() {
        let mut store = ParamStore::new();
        let layer = ActNorm::new(&mut store, "an", 2, false);
        store.set("an.scale", Tensor::new(&[2], alloc::vec![1.0, 0.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::ones(&[1, 1, 1, 2]));
        assert!(matches!(layer.forward(&mut g, &b, x), Err(Error::Domain { .. })));
    }
}

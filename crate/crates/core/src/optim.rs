//! Adam with linear warmup, global-norm clipping and optional L2 decay on
//! the 1×1 convolution weights.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear warmup; the rate is `lr · min(1, step / warmup)`.
    pub warmup: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    /// Coefficient `β` of the `β‖W‖²` penalty on 1×1 weights.
    pub l2_inv1x1: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 500,
            clip_norm: Some(50.0),
            l2_inv1x1: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.cfg.warmup == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (step as f64 / self.cfg.warmup as f64).min(1.0)
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::steps`] and [`Adam::moments`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::contract("adam", "restored moments do not match the parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. `grads` is consumed in store order and modified
    /// in place by clipping and decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Tensor]) -> Result<StepReport> {
        if grads.len() != store.len() {
            return Err(Error::contract("adam", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((_, p), g) in store.iter().zip(grads.iter()) {
            if g.shape() != p.value.shape() {
                return Err(Error::contract("adam", format!("{}: gradient shape {:?}", p.name, g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    layer: p.name.clone(),
                    detail: "non-finite gradient".into(),
                });
            }
        }
        let grad_norm = global_norm(grads);
        let mut clipped = false;
        if let Some(limit) = self.cfg.clip_norm {
            if grad_norm > limit {
                let k = limit / grad_norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
                clipped = true;
            }
        }
        if self.cfg.l2_inv1x1 != 0.0 {
            for ((_, p), g) in store.iter().zip(grads.iter_mut()) {
                if p.kind == ParamKind::Inv1x1Weight {
                    for (gv, w) in g.data_mut().iter_mut().zip(p.value.data()) {
                        *gv += 2.0 * self.cfg.l2_inv1x1 * w;
                    }
                }
            }
        }
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - math::pow(self.cfg.beta1, t);
        let c2 = 1.0 - math::pow(self.cfg.beta2, t);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / (math::sqrt(v[j] / c2) + eps);
            }
        }
        Ok(StepReport { grad_norm, clipped, lr })
    }
}

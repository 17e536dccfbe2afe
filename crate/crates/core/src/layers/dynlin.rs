//! K-partition dynamic linear transformation.
//!
//! The input is cut into `K` equal channel blocks `x₁ … x_K` and each block
//! gets its own affine map whose scale and shift come from the block before
//! it:
//!
//! ```text
//! standard:  y_k = s(x_{k-1}) ⊙ x_k + μ(x_{k-1}),   x₀ ≡ 1
//! inverse:   y_k = s(y_{k-1}) ⊙ x_k + μ(y_{k-1}),   y₀ ≡ 1
//! ```
//!
//! The Jacobian is triangular in partition order with `s` on the diagonal,
//! so `log|det J| = Σ_k Σ log s_k`. The standard variant inverts
//! sequentially (each `x_{k-1}` must be recovered first); the inverse
//! variant reads only `y`, so every partition inverts independently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::coupling::{CondSpec, ConstantNet, CouplingNet, FirstScale, NetShape};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::FlowRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Standard,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynLinConfig {
    pub partitions: usize,
    pub variant: Variant,
    pub cond: Option<CondSpec>,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Use `y₁ = x₁` instead of the trainable first-partition affine map.
    /// With `K = 2` this is exactly an affine coupling layer.
    pub identity_first: bool,
}

impl DynLinConfig {
    pub fn new(channels: usize, partitions: usize) -> Self {
        DynLinConfig {
            partitions,
            variant: Variant::Standard,
            cond: None,
            channels,
            hidden: 16,
            kernel: 3,
            identity_first: false,
        }
    }

    pub fn partition_width(&self) -> usize {
        self.channels / self.partitions
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        vec![self.partition_width(); self.partitions]
    }

    pub fn validate(&self) -> Result<()> {
        if self.partitions == 0 {
            return Err(Error::config("partition count K must be at least 1"));
        }
        if self.channels == 0 || self.channels % self.partitions != 0 {
            return Err(Error::config(format!(
                "{} channels cannot be cut into K = {} equal partitions",
                self.channels, self.partitions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynLin {
    name: String,
    cfg: DynLinConfig,
    first: Option<ConstantNet>,
    nets: Vec<CouplingNet>,
}

impl DynLin {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DynLinConfig, rng: &mut FlowRng) -> Result<Self> {
        cfg.validate()?;
        let pc = cfg.partition_width();
        let first = if cfg.identity_first {
            None
        } else {
            Some(ConstantNet::init(store, &format!("{name}.net1"), pc, cfg.cond)?)
        };
        let mut nets = Vec::with_capacity(cfg.partitions.saturating_sub(1));
        for k in 2..=cfg.partitions {
            let shape = NetShape {
                in_channels: pc,
                hidden: cfg.hidden,
                partition_channels: pc,
                kernel: cfg.kernel,
                cond: cfg.cond,
            };
            nets.push(CouplingNet::init(store, &format!("{name}.net{k}"), shape, rng)?);
        }
        Ok(DynLin {
            name: name.into(),
            cfg,
            first,
            nets,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &DynLinConfig {
        &self.cfg
    }

    pub fn first(&self) -> Option<&ConstantNet> {
        self.first.as_ref()
    }

    /// Networks for partitions `2..=K`, in order.
    pub fn nets(&self) -> &[CouplingNet] {
        &self.nets
    }

    fn check_input(&self, g: &Graph, x: Var, cond: Option<Var>) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[3] != self.cfg.channels {
            return Err(Error::contract(
                "dynlin",
                format!("{}: input {s:?} does not have {} channels", self.name, self.cfg.channels),
            ));
        }
        if cond.is_some() != self.cfg.cond.is_some() {
            return Err(Error::contract(
                "dynlin",
                format!("{}: condition must be given iff the layer is conditional", self.name),
            ));
        }
        Ok(())
    }

    fn first_forward(&self, g: &mut Graph, bound: &Bound, x1: Var, cond: Option<Var>) -> Result<(Var, Option<Var>)> {
        let Some(first) = &self.first else {
            return Ok((x1, None));
        };
        let s = g.shape(x1).to_vec();
        match first.apply(g, bound, (s[0], s[1], s[2]), cond)? {
            FirstScale::PerChannel { s: scale, mu } => {
                let y = g.mul(x1, scale)?;
                let y = g.add(y, mu)?;
                let log = g.log(scale)?;
                let total = g.sum(log);
                Ok((y, Some(g.scale(total, (s[1] * s[2]) as f64))))
            }
            FirstScale::Full { s: scale, mu } => {
                let y = g.mul(x1, scale)?;
                let y = g.add(y, mu)?;
                let log = g.log(scale)?;
                Ok((y, Some(g.sum_per_sample(log)?)))
            }
        }
    }

    fn first_inverse(&self, g: &mut Graph, bound: &Bound, y1: Var, cond: Option<Var>) -> Result<Var> {
        let Some(first) = &self.first else {
            return Ok(y1);
        };
        let s = g.shape(y1).to_vec();
        let (scale, mu) = match first.apply(g, bound, (s[0], s[1], s[2]), cond)? {
            FirstScale::PerChannel { s, mu } | FirstScale::Full { s, mu } => (s, mu),
        };
        let centered = g.sub(y1, mu)?;
        g.div(centered, scale)
    }

    /// Returns `y` and the per-sample log-determinant `[N]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.forward_tracked(g, bound, x, cond).map(|(y, ld, _)| (y, ld))
    }

    /// [`DynLin::forward`] that also reports the largest scale applied.
    pub fn forward_tracked(&self, g: &mut Graph, bound: &Bound, x: Var, cond: Option<Var>) -> Result<(Var, Var, f64)> {
        self.check_input(g, x, cond)?;
        let mut max_scale: f64 = 0.0;
        let n = g.shape(x)[0];
        let xs = g.channel_split(x, &self.cfg.partition_sizes())?;
        let mut logdet = g.constant(Tensor::zeros(&[n]));
        let (y1, ld1) = self.first_forward(g, bound, xs[0], cond)?;
        if let Some(ld1) = ld1 {
            logdet = g.add(logdet, ld1)?;
        }
        let mut ys = Vec::with_capacity(xs.len());
        ys.push(y1);
        for (k, net) in (1..xs.len()).zip(&self.nets) {
            let driver = match self.cfg.variant {
                Variant::Standard => xs[k - 1],
                Variant::Inverse => ys[k - 1],
            };
            let (s, mu) = net.apply(g, bound, driver, cond)?;
            max_scale = max_scale.max(g.value(s).max_abs());
            let yk = g.mul(s, xs[k])?;
            let yk = g.add(yk, mu)?;
            let log = g.log(s)?;
            let ld = g.sum_per_sample(log)?;
            logdet = g.add(logdet, ld)?;
            ys.push(yk);
        }
        let y = g.concat(&ys)?;
        Ok((y, logdet, max_scale))
    }

    fn invert_partition(&self, g: &mut Graph, bound: &Bound, k: usize, driver: Var, yk: Var, cond: Option<Var>) -> Result<Var> {
        let (s, mu) = self.nets[k - 1].apply(g, bound, driver, cond)?;
        let centered = g.sub(yk, mu)?;
        g.div(centered, s).map_err(|e| match e {
            Error::Domain { .. } => Error::domain("dynlin", format!("{}: zero scale in partition {}", self.name, k + 1)),
            other => other,
        })
    }

    pub fn inverse(&self, g: &mut Graph, bound: &Bound, y: Var, cond: Option<Var>) -> Result<Var> {
        match self.cfg.variant {
            Variant::Inverse => {
                let order: Vec<usize> = (0..self.cfg.partitions).collect();
                self.inverse_in_order(g, bound, y, cond, &order)
            }
            Variant::Standard => {
                self.check_input(g, y, cond)?;
                let ys = g.channel_split(y, &self.cfg.partition_sizes())?;
                let mut xs = Vec::with_capacity(ys.len());
                xs.push(self.first_inverse(g, bound, ys[0], cond)?);
                for k in 1..ys.len() {
                    let xk = self.invert_partition(g, bound, k, xs[k - 1], ys[k], cond)?;
                    xs.push(xk);
                }
                g.concat(&xs)
            }
        }
    }

    /// Inverts the inverse variant visiting partitions in `order` (a
    /// permutation of `0..K`). Every partition reads only `y`, so the
    /// result does not depend on the order.
    pub fn inverse_in_order(&self, g: &mut Graph, bound: &Bound, y: Var, cond: Option<Var>, order: &[usize]) -> Result<Var> {
        if self.cfg.variant != Variant::Inverse {
            return Err(Error::contract("dynlin", "order-free inversion needs the inverse variant"));
        }
        let k_total = self.cfg.partitions;
        let mut seen = vec![false; k_total];
        for &k in order {
            if k >= k_total || seen[k] {
                return Err(Error::contract("dynlin", format!("{order:?} is not a permutation of 0..{k_total}")));
            }
            seen[k] = true;
        }
        if order.len() != k_total {
            return Err(Error::contract("dynlin", format!("{order:?} is not a permutation of 0..{k_total}")));
        }
        self.check_input(g, y, cond)?;
        let ys = g.channel_split(y, &self.cfg.partition_sizes())?;
        let mut xs: Vec<Option<Var>> = vec![None; k_total];
        for &k in order {
            xs[k] = Some(if k == 0 {
                self.first_inverse(g, bound, ys[0], cond)?
            } else {
                self.invert_partition(g, bound, k, ys[k - 1], ys[k], cond)?
            });
        }
        let xs: Vec<Var> = xs.into_iter().map(|v| v.expect("every partition visited")).collect();
        g.concat(&xs)
    }
}

/// Reference affine coupling layer: `y₁ = x₁`, `y₂ = s(x₁) ⊙ x₂ + μ(x₁)`,
/// with `net` producing `(s, μ)` from the first half.
pub fn affine_coupling(g: &mut Graph, bound: &Bound, net: &CouplingNet, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
    let c = g.shape(x)[3];
    let n = g.shape(x)[0];
    let halves = g.channel_split(x, &[c / 2, c / 2])?;
    let (s, mu) = net.apply(g, bound, halves[0], cond)?;
    let y2 = g.mul(s, halves[1])?;
    let y2 = g.add(y2, mu)?;
    let log = g.log(s)?;
    let ld = g.sum_per_sample(log)?;
    let zeros = g.constant(Tensor::zeros(&[n]));
    let ld = g.add(zeros, ld)?;
    let y = g.concat(&[halves[0], y2])?;
    Ok((y, ld))
}

//! Networks that produce the per-partition scale and shift `(s_k, μ_k)`.
//!
//! [`CouplingNet`] reads the previous partition through three convolutions
//! (3×3 → ReLU → 1×1 → ReLU → 3×3). The last convolution emits twice the
//! partition width; its output `o` is split into `(log s′, μ)` and the scale
//! is bounded as `s = exp(α·tanh(log s′) + β)`. [`ConstantNet`] plays the
//! same role for the first partition, whose driver is the constant 1: the
//! conv stack collapses to a trainable per-channel `o`.
//!
//! Conditioning is additive on `o`: a class one-hot `h` contributes `V·h`,
//! a spatial condition contributes a 3×3 convolution of `h`.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::rng::{normal, FlowRng};
use crate::tensor::Tensor;

/// Side information fed to every coupling network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondSpec {
    /// One-hot class labels `[N, classes]`.
    Classes(usize),
    /// A spatial map `[N, H, W, channels]` matching the driver's grid.
    Spatial(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub partition_channels: usize,
    /// Spatial size of the first and last convolutions (3 for images, 1
    /// for flat vectors, where a 3×3 kernel would only use its centre tap).
    pub kernel: usize,
    pub cond: Option<CondSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CondParams {
    Matrix(ParamId),
    Conv { kernel: ParamId, zero_bias: usize },
}

/// Scale bounding shared by both net kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stabilizer {
    alpha: ParamId,
    beta: ParamId,
}

impl Stabilizer {
    fn new(store: &mut ParamStore, prefix: &str) -> Self {
        Stabilizer {
            alpha: store.add(format!("{prefix}.alpha"), Tensor::scalar(1.0), ParamKind::Other),
            beta: store.add(format!("{prefix}.beta"), Tensor::scalar(0.0), ParamKind::Other),
        }
    }

    /// Splits `o` along channels and returns `(s, μ)`.
    fn finish(&self, g: &mut Graph, bound: &Bound, o: Var, width: usize) -> Result<(Var, Var)> {
        let parts = g.channel_split(o, &[width, width])?;
        let t = g.tanh(parts[0])?;
        let scaled = g.mul(bound.var(self.alpha), t)?;
        let log_s = g.add(scaled, bound.var(self.beta))?;
        let s = g.exp(log_s)?;
        Ok((s, parts[1]))
    }
}

fn add_cond(
    g: &mut Graph,
    bound: &Bound,
    cond: Option<&CondParams>,
    h: Option<Var>,
    op: &'static str,
) -> Result<Option<Var>> {
    match (cond, h) {
        (None, None) => Ok(None),
        (Some(CondParams::Matrix(v)), Some(h)) => {
            let vs = g.shape(bound.var(*v)).to_vec();
            let hs = g.shape(h);
            if hs.len() != 2 || hs[1] != vs[1] {
                return Err(Error::contract(op, format!("condition {hs:?} does not match {} classes", vs[1])));
            }
            Ok(Some(g.linear(h, bound.var(*v))?))
        }
        (Some(CondParams::Conv { kernel, zero_bias }), Some(h)) => {
            let ks = g.shape(bound.var(*kernel)).to_vec();
            let hs = g.shape(h);
            if hs.len() != 4 || hs[3] != ks[2] {
                return Err(Error::contract(op, format!("spatial condition {hs:?} does not match {} channels", ks[2])));
            }
            let zb = g.constant(Tensor::zeros(&[*zero_bias]));
            Ok(Some(g.conv2d(h, bound.var(*kernel), zb)?))
        }
        (Some(_), None) => Err(Error::contract(op, "net is conditional but no condition was given")),
        (None, Some(_)) => Err(Error::contract(op, "condition given to an unconditional net")),
    }
}

fn cond_params(store: &mut ParamStore, prefix: &str, spec: Option<CondSpec>, out: usize) -> Option<CondParams> {
    spec.map(|c| match c {
        CondSpec::Classes(k) => CondParams::Matrix(store.add(
            format!("{prefix}.cond.v"),
            Tensor::zeros(&[out, k]),
            ParamKind::Other,
        )),
        CondSpec::Spatial(ch) => CondParams::Conv {
            kernel: store.add(
                format!("{prefix}.cond.kernel"),
                Tensor::zeros(&[3, 3, ch, out]),
                ParamKind::Other,
            ),
            zero_bias: out,
        },
    })
}

fn check_shape(shape: &NetShape) -> Result<()> {
    if shape.in_channels == 0 || shape.hidden == 0 || shape.partition_channels == 0 {
        return Err(Error::config(format!("coupling net sizes must be positive: {shape:?}")));
    }
    if !matches!(shape.kernel, 1 | 3) {
        return Err(Error::config(format!("kernel size {} not supported", shape.kernel)));
    }
    match shape.cond {
        Some(CondSpec::Classes(0)) | Some(CondSpec::Spatial(0)) => {
            Err(Error::config("condition width must be positive"))
        }
        _ => Ok(()),
    }
}

/// `g_θk` for partitions k ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingNet {
    shape: NetShape,
    prefix: String,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    conv3: (ParamId, ParamId),
    stab: Stabilizer,
    cond: Option<CondParams>,
}

impl CouplingNet {
    /// Registers a fresh net: fan-in-scaled Gaussian weights in the first two
    /// convolutions, zeros in the last, `α = 1`, `β = 0`, `V = 0`. A fresh
    /// net therefore outputs `s = 1`, `μ = 0` for any driver.
    pub fn init(store: &mut ParamStore, prefix: &str, shape: NetShape, rng: &mut FlowRng) -> Result<Self> {
        check_shape(&shape)?;
        let NetShape {
            in_channels: ci,
            hidden: c,
            partition_channels: pc,
            kernel: k,
            ..
        } = shape;
        let mut gauss = |shape: &[usize], fan_in: usize| {
            let sd = 1.0 / math::sqrt(fan_in as f64);
            Tensor::from_fn(shape, |_| sd * normal(rng))
        };
        let w1 = gauss(&[k, k, ci, c], k * k * ci);
        let w2 = gauss(&[1, 1, c, c], c);
        let conv1 = (
            store.add(format!("{prefix}.conv1.weight"), w1, ParamKind::Other),
            store.add(format!("{prefix}.conv1.bias"), Tensor::zeros(&[c]), ParamKind::Other),
        );
        let conv2 = (
            store.add(format!("{prefix}.conv2.weight"), w2, ParamKind::Other),
            store.add(format!("{prefix}.conv2.bias"), Tensor::zeros(&[c]), ParamKind::Other),
        );
        let conv3 = (
            store.add(format!("{prefix}.conv3.weight"), Tensor::zeros(&[k, k, c, 2 * pc]), ParamKind::Other),
            store.add(format!("{prefix}.conv3.bias"), Tensor::zeros(&[2 * pc]), ParamKind::Other),
        );
        let stab = Stabilizer::new(store, prefix);
        let cond = cond_params(store, prefix, shape.cond, 2 * pc);
        Ok(CouplingNet {
            shape,
            prefix: prefix.into(),
            conv1,
            conv2,
            conv3,
            stab,
            cond,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Output channels of the last convolution.
    pub fn output_channels(&self, store: &ParamStore) -> usize {
        store.get(self.conv3.0).shape()[3]
    }

    pub fn alpha(&self) -> ParamId {
        self.stab.alpha
    }

    pub fn beta(&self) -> ParamId {
        self.stab.beta
    }

    /// The pre-split output `o`, including the conditioning term.
    pub fn raw_output(&self, g: &mut Graph, bound: &Bound, driver: Var, cond: Option<Var>) -> Result<Var> {
        let ds = g.shape(driver);
        if ds.len() != 4 || ds[3] != self.shape.in_channels {
            return Err(Error::contract(
                "coupling_net",
                format!("driver {ds:?} does not have {} channels", self.shape.in_channels),
            ));
        }
        let (n, h, w) = (ds[0], ds[1], ds[2]);
        let a = g.conv2d(driver, bound.var(self.conv1.0), bound.var(self.conv1.1))?;
        let a = g.relu(a)?;
        let b = g.conv2d(a, bound.var(self.conv2.0), bound.var(self.conv2.1))?;
        let b = g.relu(b)?;
        let o = g.conv2d(b, bound.var(self.conv3.0), bound.var(self.conv3.1))?;
        match add_cond(g, bound, self.cond.as_ref(), cond, "coupling_net")? {
            None => Ok(o),
            Some(extra) => {
                let extra = if g.shape(extra).len() == 2 {
                    g.expand_spatial(extra, h, w)?
                } else {
                    extra
                };
                if g.shape(extra)[..3] != [n, h, w] {
                    return Err(Error::contract("coupling_net", "condition grid does not match driver"));
                }
                g.add(o, extra)
            }
        }
    }

    /// `(s, μ)`, each shaped like the partition the net drives.
    pub fn apply(&self, g: &mut Graph, bound: &Bound, driver: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let o = self.raw_output(g, bound, driver, cond)?;
        self.stab.finish(g, bound, o, self.shape.partition_channels)
    }
}

/// The first-partition transform `y₁ = s₁ ⊙ x₁ + μ₁` with per-channel
/// trainable constants shared across spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantNet {
    partition_channels: usize,
    bias: ParamId,
    stab: Stabilizer,
    cond: Option<CondParams>,
}

/// Scale and shift from a [`ConstantNet`]: either shared per channel or,
/// when conditioned, materialized per sample and position.
#[derive(Debug, Clone, Copy)]
pub enum FirstScale {
    PerChannel { s: Var, mu: Var },
    Full { s: Var, mu: Var },
}

impl ConstantNet {
    pub fn init(store: &mut ParamStore, prefix: &str, partition_channels: usize, cond: Option<CondSpec>) -> Result<Self> {
        check_shape(&NetShape {
            in_channels: 1,
            hidden: 1,
            partition_channels,
            kernel: 1,
            cond,
        })?;
        let bias = store.add(
            format!("{prefix}.bias"),
            Tensor::zeros(&[2 * partition_channels]),
            ParamKind::Other,
        );
        let stab = Stabilizer::new(store, prefix);
        let cond = cond_params(store, prefix, cond, 2 * partition_channels);
        Ok(ConstantNet {
            partition_channels,
            bias,
            stab,
            cond,
        })
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn alpha(&self) -> ParamId {
        self.stab.alpha
    }

    pub fn beta(&self) -> ParamId {
        self.stab.beta
    }

    /// Scale and shift for a partition of spatial size `h × w` and batch `n`.
    pub fn apply(&self, g: &mut Graph, bound: &Bound, grid: (usize, usize, usize), cond: Option<Var>) -> Result<FirstScale> {
        let (n, h, w) = grid;
        let pc = self.partition_channels;
        match add_cond(g, bound, self.cond.as_ref(), cond, "constant_net")? {
            None => {
                let (s, mu) = self.stab.finish(g, bound, bound.var(self.bias), pc)?;
                Ok(FirstScale::PerChannel { s, mu })
            }
            Some(extra) => {
                let (s, mu) = if g.shape(extra).len() == 2 {
                    if g.shape(extra)[0] != n {
                        return Err(Error::contract("constant_net", "condition batch does not match input"));
                    }
                    let o = g.add(bound.var(self.bias), extra)?;
                    let (s, mu) = self.stab.finish(g, bound, o, pc)?;
                    (g.expand_spatial(s, h, w)?, g.expand_spatial(mu, h, w)?)
                } else {
                    if g.shape(extra)[..3] != [n, h, w] {
                        return Err(Error::contract("constant_net", "condition grid does not match input"));
                    }
                    let o = g.add(extra, bound.var(self.bias))?;
                    self.stab.finish(g, bound, o, pc)?
                };
                Ok(FirstScale::Full { s, mu })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn shape(cond: Option<CondSpec>) -> NetShape {
        NetShape {
            in_channels: 2,
            hidden: 6,
            partition_channels: 4,
            kernel: 3,
            cond,
        }
    }

    #[test]
    fn fresh_net_is_identity_and_last_conv_is_twice_partition() {
        let mut store = ParamStore::new();
        let net = CouplingNet::init(&mut store, "n", shape(None), &mut seeded(1, 0)).unwrap();
        assert_eq!(net.output_channels(&store), 8);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64).sin() * 3.0));
        let (s, mu) = net.apply(&mut g, &b, x, None).unwrap();
        assert_eq!(g.shape(s), &[2, 3, 3, 4]);
        assert!(g.value(s).data().iter().all(|&v| v == 1.0));
        assert!(g.value(mu).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nets_do_not_share_parameters() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1, 0);
        let a = CouplingNet::init(&mut store, "a", shape(None), &mut rng).unwrap();
        let before = store.clone();
        let b = CouplingNet::init(&mut store, "b", shape(None), &mut rng).unwrap();
        assert_ne!(a.alpha(), b.alpha());
        store.get_mut(b.conv1.0).data_mut()[0] += 1.0;
        for (id, p) in before.iter() {
            assert_eq!(store.get(id), &p.value);
        }
    }

    #[test]
    fn zero_alpha_gives_constant_scale() {
        let mut store = ParamStore::new();
        let net = CouplingNet::init(&mut store, "n", shape(None), &mut seeded(2, 0)).unwrap();
        let mut rng = seeded(9, 0);
        for (_, p) in store.iter_mut() {
            p.value = p.value.map(|_| normal(&mut rng));
        }
        store.set("n.alpha", Tensor::scalar(0.0)).unwrap();
        store.set("n.beta", Tensor::scalar(2f64.ln())).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let (s, _) = net.apply(&mut g, &b, x, None).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn zero_condition_matches_unconditional() {
        let mut rng = seeded(4, 0);
        let mut plain = ParamStore::new();
        let p = CouplingNet::init(&mut plain, "n", shape(None), &mut rng.clone()).unwrap();
        let mut cond = ParamStore::new();
        let c = CouplingNet::init(&mut cond, "n", shape(Some(CondSpec::Classes(3))), &mut rng).unwrap();
        let mut r = seeded(5, 0);
        for (_, q) in plain.iter_mut() {
            q.value = q.value.map(|_| normal(&mut r));
        }
        for (id, q) in plain.iter() {
            cond.set(&q.name, q.value.clone()).unwrap();
            let _ = id;
        }
        let v = cond.find("n.cond.v").unwrap();
        *cond.get_mut(v) = Tensor::from_fn(&[8, 3], |i| i as f64 * 0.1);
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.7).cos());
        let mut g = Graph::new();
        let bp = plain.bind(&mut g);
        let bc = cond.bind(&mut g);
        let xv = g.constant(x);
        let h = g.constant(Tensor::zeros(&[2, 3]));
        let op = p.raw_output(&mut g, &bp, xv, None).unwrap();
        let oc = c.raw_output(&mut g, &bc, xv, Some(h)).unwrap();
        assert_eq!(g.value(op), g.value(oc));
        assert!(c.raw_output(&mut g, &bc, xv, None).is_err());
        let wrong = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(c.raw_output(&mut g, &bc, xv, Some(wrong)), Err(Error::Contract { .. })));
    }

    #[test]
    fn conditioning_is_additive() {
        let mut store = ParamStore::new();
        let net = CouplingNet::init(&mut store, "n", shape(Some(CondSpec::Classes(3))), &mut seeded(6, 0)).unwrap();
        let mut r = seeded(7, 0);
        for (_, q) in store.iter_mut() {
            q.value = q.value.map(|_| normal(&mut r));
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.3));
        let h1 = g.constant(Tensor::new(&[1, 3], alloc::vec![1.0, 0.0, 0.0]).unwrap());
        let h2 = g.constant(Tensor::new(&[1, 3], alloc::vec![0.0, 0.0, 1.0]).unwrap());
        let o1 = net.raw_output(&mut g, &b, x, Some(h1)).unwrap();
        let o2 = net.raw_output(&mut g, &b, x, Some(h2)).unwrap();
        let v = store.get(store.find("n.cond.v").unwrap());
        for (i, (a, c)) in g.value(o1).data().iter().zip(g.value(o2).data()).enumerate() {
            let ch = i % 8;
            let want = v.data()[ch * 3] - v.data()[ch * 3 + 2];
            assert!(((a - c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_condition_path() {
        let mut store = ParamStore::new();
        let net = CouplingNet::init(&mut store, "n", shape(Some(CondSpec::Spatial(1))), &mut seeded(6, 0)).unwrap();
        let k = store.find("n.cond.kernel").unwrap();
        *store.get_mut(k) = Tensor::from_fn(&[3, 3, 1, 8], |i| i as f64 * 0.01);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        let h = g.constant(Tensor::ones(&[1, 2, 2, 1]));
        let o = net.raw_output(&mut g, &b, x, Some(h)).unwrap();
        assert!(g.value(o).data().iter().any(|&v| v != 0.0));
        let bad = g.constant(Tensor::ones(&[1, 3, 3, 1]));
        assert!(net.raw_output(&mut g, &b, x, Some(bad)).is_err());
    }

    #[test]
    fn scale_is_positive_and_bounded() {
        let mut store = ParamStore::new();
        let net = CouplingNet::init(&mut store, "n", shape(None), &mut seeded(8, 0)).unwrap();
        let mut r = seeded(10, 0);
        for (_, q) in store.iter_mut() {
            q.value = q.value.map(|_| 3.0 * normal(&mut r));
        }
        let a = store.get(net.alpha()).item().abs();
        let bt = store.get(net.beta()).item().abs();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[4, 3, 3, 2], |_| 10.0 * normal(&mut r)));
        let (s, _) = net.apply(&mut g, &b, x, None).unwrap();
        for &v in g.value(s).data() {
            assert!(v > 0.0);
            assert!(v.ln().abs() <= a + bt + 1e-12);
        }
    }
}

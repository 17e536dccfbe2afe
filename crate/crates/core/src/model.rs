//! The multi-scale flow: per level a squeeze, `steps` × (1×1 convolution,
//! dynamic linear transformation), then a split that factors half the
//! channels out as latent variables. The last level keeps everything.
//!
//! Flat (vector) models have a single level with no squeeze or split and
//! carry their input as `[N, 1, 1, D]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::coupling::CondSpec;
use crate::error::{Error, Result};
use crate::layers::{self, ActNorm, DynLin, DynLinConfig, Inv1x1, Variant};
use crate::math::{self, LN_2};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal, seeded, streams, FlowRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Image { height: usize, width: usize, channels: usize },
    Flat { dim: usize },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Image { height, width, channels } => height * width * channels,
            InputShape::Flat { dim } => dim,
        }
    }

    /// Shape of one sample as carried through the flow.
    fn grid(&self) -> [usize; 3] {
        match *self {
            InputShape::Image { height, width, channels } => [height, width, channels],
            InputShape::Flat { dim } => [1, 1, dim],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input: InputShape,
    pub levels: usize,
    pub steps: usize,
    pub partitions: usize,
    pub hidden: usize,
    pub n_bits: u32,
    pub variant: Variant,
    pub classes: Option<usize>,
    /// Insert an actnorm layer at the start of every step.
    pub actnorm: bool,
    /// Initialize actnorm from the first batch instead of `s = 1, μ = 0`.
    pub actnorm_data_init: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn flat(dim: usize, partitions: usize) -> Self {
        ModelConfig {
            input: InputShape::Flat { dim },
            levels: 1,
            steps: 32,
            partitions,
            hidden: 64,
            n_bits: 8,
            variant: Variant::Standard,
            classes: None,
            actnorm: false,
            actnorm_data_init: true,
            seed: 0,
        }
    }

    pub fn image(height: usize, width: usize, channels: usize, levels: usize, partitions: usize) -> Self {
        ModelConfig {
            input: InputShape::Image { height, width, channels },
            levels,
            ..Self::flat(1, partitions)
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_classes(mut self, classes: Option<usize>) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_actnorm(mut self, on: bool) -> Self {
        self.actnorm = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.input.dim()
    }

    /// Checks every divisibility constraint, naming the offending level.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.levels == 0 || self.partitions == 0 || self.hidden == 0 {
            return Err(Error::config("levels, steps, K and hidden channels must all be at least 1"));
        }
        if self.n_bits == 0 || self.n_bits > 16 {
            return Err(Error::config(format!("n_bits = {} outside 1..=16", self.n_bits)));
        }
        if self.classes == Some(0) {
            return Err(Error::config("class count must be positive"));
        }
        match self.input {
            InputShape::Flat { dim } => {
                if self.levels != 1 {
                    return Err(Error::config("flat models have exactly one level"));
                }
                if dim == 0 || dim % self.partitions != 0 {
                    return Err(Error::config(format!(
                        "level 0: D = {dim} not divisible by K = {}",
                        self.partitions
                    )));
                }
            }
            InputShape::Image { height, width, channels } => {
                let f = 1usize << self.levels;
                if height == 0 || width == 0 || channels == 0 || height % f != 0 || width % f != 0 {
                    return Err(Error::config(format!(
                        "{height}x{width} image is not divisible by 2^L = {f}"
                    )));
                }
                let mut c = channels;
                for level in 0..self.levels {
                    c *= 4;
                    if c % self.partitions != 0 {
                        return Err(Error::config(format!(
                            "level {level}: {c} channels not divisible by K = {}",
                            self.partitions
                        )));
                    }
                    if level + 1 < self.levels {
                        if c % 2 != 0 {
                            return Err(Error::config(format!("level {level}: {c} channels cannot be split")));
                        }
                        c /= 2;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    ActNorm(ActNorm),
    Inv1x1(Inv1x1),
    DynLin(DynLin),
    Squeeze,
    /// Factors out half the channels into latent slot `latent`.
    Split { latent: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub name: String,
    pub layer: Layer,
}

/// Where a factored latent lives in the flattened code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSlot {
    /// Per-sample `[h, w, c]`.
    pub shape: [usize; 3],
    pub offset: usize,
}

impl LatentSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// One value per latent slot, `[N, h, w, c]`.
    pub latents: Vec<Var>,
    /// Total log-determinant, `[N]`.
    pub logdet: Var,
    /// `(layer index, log-det [N])` for every layer.
    pub layer_logdets: Vec<(usize, Var)>,
    /// Largest scale produced by any dynamic linear layer.
    pub max_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Likelihood {
    /// Negative log-likelihood in nats, per sample.
    pub nll: Vec<f64>,
    /// Bits per dimension (image models only), per sample.
    pub bits_per_dim: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean over the batch of NLL per dimension, in nats.
    pub loss: f64,
    /// Per-sample NLL in nats.
    pub nll: Vec<f64>,
    /// Gradient of `loss` for every parameter, in store order.
    pub grads: Vec<Tensor>,
    pub max_scale: f64,
}

/// One-hot encoding `[N, classes]` of integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} at index {i} outside 0..{classes}")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Vec<LayerEntry>,
    latents: Vec<LatentSlot>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = seeded(config.seed, streams::INIT);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut latents = Vec::new();
        let [mut h, mut w, mut c] = config.input.grid();
        let image = config.input.is_image();
        let mut offset = 0;
        for level in 0..config.levels {
            if image {
                layers.push(LayerEntry {
                    name: format!("level{level}.squeeze"),
                    layer: Layer::Squeeze,
                });
                h /= 2;
                w /= 2;
                c *= 4;
            }
            for step in 0..config.steps {
                let prefix = format!("level{level}.step{step}");
                if config.actnorm {
                    let name = format!("{prefix}.actnorm");
                    let an = ActNorm::new(&mut params, &name, c, config.actnorm_data_init);
                    layers.push(LayerEntry {
                        name,
                        layer: Layer::ActNorm(an),
                    });
                }
                let name = format!("{prefix}.inv1x1");
                let inv = Inv1x1::new(&mut params, &name, c, &mut rng);
                layers.push(LayerEntry {
                    name,
                    layer: Layer::Inv1x1(inv),
                });
                let name = format!("{prefix}.dynlin");
                let cfg = DynLinConfig {
                    partitions: config.partitions,
                    variant: config.variant,
                    cond: config.classes.map(CondSpec::Classes),
                    channels: c,
                    hidden: config.hidden,
                    kernel: if image { 3 } else { 1 },
                    identity_first: false,
                };
                let dl = DynLin::new(&mut params, &name, cfg, &mut rng)
                    .map_err(|e| Error::config(format!("{name}: {e}")))?;
                layers.push(LayerEntry {
                    name,
                    layer: Layer::DynLin(dl),
                });
            }
            if level + 1 < config.levels {
                c /= 2;
                let slot = LatentSlot { shape: [h, w, c], offset };
                offset += slot.len();
                latents.push(slot);
                layers.push(LayerEntry {
                    name: format!("level{level}.split"),
                    layer: Layer::Split { latent: latents.len() - 1 },
                });
            }
        }
        let last = LatentSlot { shape: [h, w, c], offset };
        latents.push(last);
        if offset + last.len() != config.dim() {
            return Err(Error::config("latent bookkeeping does not cover the input"));
        }
        Ok(Model {
            config,
            params,
            layers,
            latents,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerEntry] {
        &self.layers
    }

    pub fn latent_slots(&self) -> &[LatentSlot] {
        &self.latents
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Whether every actnorm layer has been initialized.
    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match &l.layer {
            Layer::ActNorm(a) => a.is_initialized(),
            _ => true,
        })
    }

    /// Marks every actnorm layer initialized, e.g. after loading trained
    /// parameters.
    pub fn mark_initialized(&mut self) {
        for l in &mut self.layers {
            if let Layer::ActNorm(a) = &mut l.layer {
                a.set_initialized();
            }
        }
    }

    /// Converts a batch to the `[N, h, w, c]` layout the layers use.
    pub fn to_grid(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, c] = self.config.input.grid();
        let ok = match self.config.input {
            InputShape::Flat { dim } => x.rank() == 2 && x.shape()[1] == dim,
            InputShape::Image { .. } => x.rank() == 4 && x.shape()[1..] == [h, w, c],
        };
        if !ok {
            return Err(Error::contract(
                "model",
                format!("input {:?} does not match configured shape {:?}", x.shape(), self.config.input),
            ));
        }
        x.clone().reshape(&[x.batch(), h, w, c])
    }

    fn from_grid(&self, x: Tensor) -> Result<Tensor> {
        match self.config.input {
            InputShape::Flat { dim } => {
                let n = x.batch();
                x.reshape(&[n, dim])
            }
            InputShape::Image { .. } => Ok(x),
        }
    }

    fn check_cond(&self, n: usize, cond: Option<&Tensor>) -> Result<()> {
        match (self.config.classes, cond) {
            (None, None) => Ok(()),
            (Some(k), Some(h)) if h.shape() == [n, k] => Ok(()),
            (Some(k), Some(h)) => Err(Error::contract(
                "model",
                format!("condition {:?} should be [{n}, {k}]", h.shape()),
            )),
            (Some(_), None) => Err(Error::contract("model", "conditional model needs a condition")),
            (None, Some(_)) => Err(Error::contract("model", "unconditional model given a condition")),
        }
    }

    /// Runs the flow on graph values. `x` is `[N, h, w, c]`.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, x: Var, cond: Option<Var>) -> Result<ForwardPass> {
        let n = g.shape(x)[0];
        let mut cur = x;
        let mut logdet = g.constant(Tensor::zeros(&[n]));
        let mut latents = vec![None; self.latents.len()];
        let mut layer_logdets = Vec::with_capacity(self.layers.len());
        let mut max_scale: f64 = 0.0;
        for (idx, entry) in self.layers.iter().enumerate() {
            let ld = match &entry.layer {
                Layer::Squeeze => {
                    cur = layers::squeeze(g, cur)?;
                    None
                }
                Layer::Split { latent } => {
                    let (keep, z) = layers::split_out(g, cur)?;
                    latents[*latent] = Some(z);
                    cur = keep;
                    None
                }
                Layer::ActNorm(a) => {
                    let (y, ld) = a.forward(g, bound, cur)?;
                    cur = y;
                    Some(ld)
                }
                Layer::Inv1x1(inv) => {
                    let (y, ld) = inv.forward(g, bound, cur)?;
                    cur = y;
                    Some(ld)
                }
                Layer::DynLin(dl) => {
                    let (y, ld, scale) = dl.forward_tracked(g, bound, cur, cond)?;
                    max_scale = max_scale.max(scale);
                    cur = y;
                    Some(ld)
                }
            };
            if !g.value(cur).is_finite() {
                return Err(Error::Numeric {
                    layer: entry.name.clone(),
                    detail: "non-finite activation".into(),
                });
            }
            let ld = match ld {
                Some(ld) => {
                    if !g.value(ld).is_finite() {
                        return Err(Error::Numeric {
                            layer: entry.name.clone(),
                            detail: "non-finite log-determinant".into(),
                        });
                    }
                    logdet = g.add(logdet, ld)?;
                    ld
                }
                None => g.constant(Tensor::zeros(&[n])),
            };
            layer_logdets.push((idx, ld));
        }
        let last = self.latents.len() - 1;
        latents[last] = Some(cur);
        Ok(ForwardPass {
            latents: latents.into_iter().map(|v| v.expect("every slot filled")).collect(),
            logdet,
            layer_logdets,
            max_scale,
        })
    }

    /// Per-sample NLL `[N]` on the graph, with the forward pass.
    pub fn nll_graph(&self, g: &mut Graph, bound: &Bound, x: Var, cond: Option<Var>) -> Result<(Var, ForwardPass)> {
        let pass = self.forward_graph(g, bound, x, cond)?;
        let mut logp = pass.logdet;
        for &z in &pass.latents {
            let lp = layers::prior_log_density(g, z)?;
            logp = g.add(logp, lp)?;
        }
        let nll = g.neg(logp)?;
        Ok((nll, pass))
    }

    fn prepare(&self, g: &mut Graph, x: &Tensor, cond: Option<&Tensor>) -> Result<(Var, Option<Var>)> {
        let grid = self.to_grid(x)?;
        self.check_cond(grid.batch(), cond)?;
        let xv = g.constant(grid);
        let hv = cond.map(|h| g.constant(h.clone()));
        Ok((xv, hv))
    }

    /// Converts per-sample NLL (nats) to bits per dimension under
    /// `n_bits` quantization.
    pub fn bits_per_dim(&self, nll: f64) -> f64 {
        nll / (self.dim() as f64 * LN_2) + self.config.n_bits as f64
    }

    /// NLL of an already dequantized (and shifted) batch.
    pub fn log_likelihood(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Likelihood> {
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let (xv, hv) = self.prepare(&mut g, x, cond)?;
        let (nll, _) = self.nll_graph(&mut g, &bound, xv, hv)?;
        let nll = g.value(nll).data().to_vec();
        if let Some(bad) = nll.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "prior".into(),
                detail: format!("non-finite NLL for sample {bad}"),
            });
        }
        let bits_per_dim = self
            .config
            .input
            .is_image()
            .then(|| nll.iter().map(|&v| self.bits_per_dim(v)).collect());
        Ok(Likelihood { nll, bits_per_dim })
    }

    /// Total log-determinant of the flow per sample.
    pub fn log_det(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let (xv, hv) = self.prepare(&mut g, x, cond)?;
        let pass = self.forward_graph(&mut g, &bound, xv, hv)?;
        Ok(g.value(pass.logdet).data().to_vec())
    }

    /// Per-layer log-determinants `(layer name, [N])`, each from the
    /// layer's own forward map.
    pub fn layer_logdets(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<(String, Vec<f64>)>> {
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let (xv, hv) = self.prepare(&mut g, x, cond)?;
        let pass = self.forward_graph(&mut g, &bound, xv, hv)?;
        Ok(pass
            .layer_logdets
            .iter()
            .map(|&(i, v)| (self.layers[i].name.clone(), g.value(v).data().to_vec()))
            .collect())
    }

    /// Mean NLL per dimension and its gradient for every parameter.
    pub fn loss_and_grads(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<LossAndGrads> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let (xv, hv) = self.prepare(&mut g, x, cond)?;
        let (nll, pass) = self.nll_graph(&mut g, &bound, xv, hv)?;
        let mean = g.mean(nll);
        let loss = g.scale(mean, 1.0 / self.dim() as f64);
        let value = g.value(loss).item();
        let nll_values = g.value(nll).data().to_vec();
        let mut grads = g.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        Ok(LossAndGrads {
            loss: value,
            nll: nll_values,
            grads,
            max_scale: pass.max_scale,
        })
    }

    /// Maps a batch to its flattened latent code `[N, D]`, slots
    /// concatenated in registry order.
    pub fn encode(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let (xv, hv) = self.prepare(&mut g, x, cond)?;
        let pass = self.forward_graph(&mut g, &bound, xv, hv)?;
        let n = x.batch();
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for (slot, &z) in self.latents.iter().zip(&pass.latents) {
            let len = slot.len();
            for (i, chunk) in g.value(z).data().chunks(len).enumerate() {
                out[i * d + slot.offset..i * d + slot.offset + len].copy_from_slice(chunk);
            }
        }
        Tensor::new(&[n, d], out)
    }

    fn latent_var(&self, g: &mut Graph, z: &Tensor, slot: &LatentSlot) -> Result<Var> {
        let n = z.batch();
        let d = self.dim();
        let len = slot.len();
        let mut data = Vec::with_capacity(n * len);
        for row in z.data().chunks(d) {
            data.extend_from_slice(&row[slot.offset..slot.offset + len]);
        }
        let [h, w, c] = slot.shape;
        Ok(g.constant(Tensor::new(&[n, h, w, c], data)?))
    }

    /// Inverse of [`Model::encode`].
    pub fn decode(&self, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.dim() {
            return Err(Error::contract(
                "decode",
                format!("latent {:?} should be [N, {}]", z.shape(), self.dim()),
            ));
        }
        let n = z.batch();
        self.check_cond(n, cond)?;
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let hv = cond.map(|h| g.constant(h.clone()));
        let mut cur = self.latent_var(&mut g, z, self.latents.last().unwrap())?;
        for entry in self.layers.iter().rev() {
            cur = match &entry.layer {
                Layer::Squeeze => layers::unsqueeze(&mut g, cur)?,
                Layer::Split { latent } => {
                    let zv = self.latent_var(&mut g, z, &self.latents[*latent])?;
                    layers::merge(&mut g, cur, zv)?
                }
                Layer::ActNorm(a) => a.inverse(&mut g, &bound, cur)?,
                Layer::Inv1x1(inv) => inv.inverse(&mut g, &bound, cur)?,
                Layer::DynLin(dl) => dl.inverse(&mut g, &bound, cur, hv)?,
            };
            if !g.value(cur).is_finite() {
                return Err(Error::Numeric {
                    layer: entry.name.clone(),
                    detail: "non-finite value while decoding".into(),
                });
            }
        }
        self.from_grid(g.value(cur).clone())
    }

    /// Draws `n` samples with latent `z ~ N(0, T²·I)`.
    pub fn sample(&self, n: usize, temperature: f64, cond: Option<&Tensor>, rng: &mut FlowRng) -> Result<(Tensor, Tensor)> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(Error::contract("sample", format!("temperature {temperature} must be finite and ≥ 0")));
        }
        let z = Tensor::from_fn(&[n, self.dim()], |_| {
            let e = normal(rng);
            if temperature == 0.0 {
                0.0
            } else {
                temperature * e
            }
        });
        let x = self.decode(&z, cond)?;
        Ok((x, z))
    }

    /// Latents on the segment between the codes of `a` and `b`
    /// (single-sample batches), at `steps` evenly spaced points.
    pub fn interpolate_latents(&self, a: &Tensor, b: &Tensor, steps: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        if steps < 2 {
            return Err(Error::contract("interpolate", "needs at least two steps"));
        }
        if a.shape() != b.shape() || a.batch() != 1 {
            return Err(Error::contract(
                "interpolate",
                format!("endpoints {:?} and {:?} must be single samples of one shape", a.shape(), b.shape()),
            ));
        }
        let za = self.encode(a, cond)?;
        let zb = self.encode(b, cond)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(steps * d);
        for i in 0..steps {
            let t = i as f64 / (steps - 1) as f64;
            out.extend(za.data().iter().zip(zb.data()).map(|(p, q)| (1.0 - t) * p + t * q));
        }
        Tensor::new(&[steps, d], out)
    }

    pub fn interpolate(&self, a: &Tensor, b: &Tensor, steps: usize, cond: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let z = self.interpolate_latents(a, b, steps, cond)?;
        let cond_rep = match cond {
            Some(h) => Some(Tensor::stack_rows(&vec![h.clone(); steps])?),
            None => None,
        };
        let x = self.decode(&z, cond_rep.as_ref())?;
        Ok((0..steps).map(|i| x.rows(i, 1)).collect())
    }

    /// Data-dependent initialization of every uninitialized actnorm layer
    /// from `x`.
    pub fn data_init(&mut self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        while let Some(target) = self.layers.iter().position(|l| matches!(&l.layer, Layer::ActNorm(a) if !a.is_initialized())) {
            let input = self.activation_before(target, x, cond)?;
            if let Layer::ActNorm(a) = &mut self.layers[target].layer {
                a.initialize(&mut self.params, &input)?;
            }
        }
        Ok(())
    }

    fn activation_before(&self, target: usize, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let bound = self.params.bind(&mut g);
        let (mut cur, hv) = self.prepare(&mut g, x, cond)?;
        for entry in &self.layers[..target] {
            cur = match &entry.layer {
                Layer::Squeeze => layers::squeeze(&mut g, cur)?,
                Layer::Split { .. } => layers::split_out(&mut g, cur)?.0,
                Layer::ActNorm(a) => a.forward(&mut g, &bound, cur)?.0,
                Layer::Inv1x1(inv) => inv.forward(&mut g, &bound, cur)?.0,
                Layer::DynLin(dl) => dl.forward(&mut g, &bound, cur, hv)?.0,
            };
        }
        Ok(g.value(cur).clone())
    }
}

/// Standard-normal cross-entropy of `x` per sample, `Σ (x²/2 + ½ log 2π)`.
pub fn gaussian_cross_entropy(x: &Tensor) -> Vec<f64> {
    x.data()
        .chunks(x.sample_len())
        .map(|row| row.iter().map(|&v| -math::std_normal_logpdf(v)).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_latents_cover_input() {
        let m = Model::new(ModelConfig::image(8, 8, 1, 2, 2).with_steps(4).with_hidden(4)).unwrap();
        let total: usize = m.latent_slots().iter().map(|s| s.len()).sum();
        assert_eq!(total, 64);
        assert_eq!(m.latent_slots()[0].shape, [4, 4, 2]);
        assert_eq!(m.latent_slots()[1].shape, [2, 2, 8]);
    }

    #[test]
    fn flat_layer_count() {
        let m = Model::new(ModelConfig::flat(2, 2).with_steps(8).with_hidden(4)).unwrap();
        assert_eq!(m.layers().len(), 16);
        assert!(m
            .layers()
            .iter()
            .all(|l| !matches!(l.layer, Layer::Squeeze | Layer::Split { .. })));
    }

    #[test]
    fn table_shape_builds() {
        assert!(Model::new(ModelConfig::image(32, 32, 3, 3, 2).with_steps(1).with_hidden(2)).is_ok());
    }

    #[test]
    fn divisibility_errors_name_level() {
        let err = ModelConfig::image(8, 8, 1, 2, 3).validate().unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("level 0")), "{err}");
        assert!(ModelConfig::image(6, 8, 1, 2, 2).validate().is_err());
        assert!(ModelConfig::flat(5, 2).validate().is_err());
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert_eq!(one_hot(&[1, 0], 2).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(one_hot(&[2], 2).is_err());
    }
}

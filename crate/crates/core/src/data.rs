//! Datasets, batching and dequantization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{normal, permutation, seeded, streams, uniform, FlowRng};
use crate::tensor::Tensor;

/// How the stored values relate to the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Real-valued, fed to the model unchanged.
    Continuous,
    /// Integers in `[0, 2^n_bits)`, dequantized before use.
    Quantized { n_bits: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, D]` for vectors, `[N, H, W, C]` for images.
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub encoding: Encoding,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>, encoding: Encoding) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != x.batch() {
                return Err(Error::Data(format!("{} labels for {} samples", l.len(), x.batch())));
            }
        }
        Ok(Dataset { x, labels, encoding })
    }

    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.gather_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            encoding: self.encoding,
        }
    }

    /// Random `(train, valid)` partition with `valid_fraction` of the rows
    /// held out.
    pub fn split(&self, valid_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::config(format!("validation fraction {valid_fraction} outside [0, 1)")));
        }
        let n = self.len();
        let n_valid = math::floor(n as f64 * valid_fraction) as usize;
        if n_valid == 0 || n_valid == n {
            return Err(Error::Data(format!("cannot hold out {valid_fraction} of {n} samples")));
        }
        let order = permutation(n, &mut seeded(seed, streams::SPLIT));
        let mut valid = order[..n_valid].to_vec();
        let mut train = order[n_valid..].to_vec();
        valid.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&valid)))
    }

    /// Shuffled full batches for `epoch`; a trailing partial batch is
    /// dropped.
    pub fn batch_order(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = seeded(seed, streams::SHUFFLE + (epoch << 32));
        let order = permutation(self.len(), &mut rng);
        order.chunks_exact(batch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Sequential batches covering every row, for evaluation.
    pub fn eval_batches(&self, batch: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Model input for the rows `indices`, dequantized with `rng` when the
    /// data is quantized.
    pub fn model_input(&self, indices: &[usize], rng: &mut FlowRng) -> Result<(Tensor, Option<Vec<usize>>)> {
        let x = self.x.gather_rows(indices);
        let x = match self.encoding {
            Encoding::Continuous => x,
            Encoding::Quantized { n_bits } => dequantize(&x, n_bits, rng)?,
        };
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok((x, labels))
    }
}

/// `x̃ = (x + u) / 2^n_bits` with `u ~ U[0, 1)`.
pub fn dequantize(x: &Tensor, n_bits: u32, rng: &mut FlowRng) -> Result<Tensor> {
    let levels = (1u64 << n_bits) as f64;
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        if !(v >= 0.0 && v < levels && v == math::floor(v)) {
            return Err(Error::Data(format!("pixel {v} at index {i} is not an integer in [0, {levels})")));
        }
        out.push((v + uniform(rng)) / levels);
    }
    Tensor::new(x.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toy2d {
    TwoMoons,
    EightGaussians,
    Checkerboard,
}

impl Toy2d {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "two_moons" => Some(Toy2d::TwoMoons),
            "eight_gaussians" => Some(Toy2d::EightGaussians),
            "checkerboard" => Some(Toy2d::Checkerboard),
            _ => None,
        }
    }
}

/// Ring radius over per-mode standard deviation for eight_gaussians.
pub const EIGHT_GAUSSIANS_SEPARATION: f64 = 8.0;

/// A standardized 2-D toy set. `centers` holds the mode centers in the
/// standardized coordinates (eight_gaussians only).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub data: Dataset,
    pub centers: Option<Vec<[f64; 2]>>,
}

pub fn toy2d(kind: Toy2d, n: usize, seed: u64) -> Result<ToyData> {
    if n < 2 {
        return Err(Error::Data(format!("toy set needs at least 2 samples, got {n}")));
    }
    let mut rng = seeded(seed, streams::DATA);
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut centers = None;
    match kind {
        Toy2d::TwoMoons => {
            for i in 0..n {
                let upper = i % 2 == 0;
                let t = core::f64::consts::PI * uniform(&mut rng);
                let (x, y) = if upper {
                    (math::cos(t), math::sin(t))
                } else {
                    (1.0 - math::cos(t), 0.5 - math::sin(t))
                };
                pts.push(x + 0.1 * normal(&mut rng));
                pts.push(y + 0.1 * normal(&mut rng));
                labels.push(usize::from(!upper));
            }
        }
        Toy2d::EightGaussians => {
            let std = 1.0 / EIGHT_GAUSSIANS_SEPARATION;
            let raw: Vec<[f64; 2]> = (0..8)
                .map(|k| {
                    let a = k as f64 * core::f64::consts::FRAC_PI_4;
                    [math::cos(a), math::sin(a)]
                })
                .collect();
            for i in 0..n {
                let k = i % 8;
                pts.push(raw[k][0] + std * normal(&mut rng));
                pts.push(raw[k][1] + std * normal(&mut rng));
                labels.push(k);
            }
            centers = Some(raw);
        }
        Toy2d::Checkerboard => {
            for _ in 0..n {
                let x = 4.0 * uniform(&mut rng) - 2.0;
                let band = if uniform(&mut rng) < 0.5 { 0.0 } else { -2.0 };
                let y = uniform(&mut rng) + band + (math::floor(x) as i64).rem_euclid(2) as f64;
                pts.push(x);
                pts.push(y);
            }
        }
    }
    let (mean, std) = standardize(&mut pts);
    let centers = centers.map(|c| {
        c.into_iter()
            .map(|p| [(p[0] - mean[0]) / std[0], (p[1] - mean[1]) / std[1]])
            .collect()
    });
    let labels = (kind != Toy2d::Checkerboard).then_some(labels);
    Ok(ToyData {
        data: Dataset::new(Tensor::new(&[n, 2], pts)?, labels, Encoding::Continuous)?,
        centers,
    })
}

/// Standardizes interleaved 2-D points in place, returning the original
/// per-axis mean and standard deviation.
fn standardize(pts: &mut [f64]) -> ([f64; 2], [f64; 2]) {
    let n = (pts.len() / 2) as f64;
    let mut mean = [0.0; 2];
    for p in pts.chunks(2) {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 2];
    for p in pts.chunks(2) {
        var[0] += (p[0] - mean[0]) * (p[0] - mean[0]);
        var[1] += (p[1] - mean[1]) * (p[1] - mean[1]);
    }
    let std = [math::sqrt(var[0] / n), math::sqrt(var[1] / n)];
    for p in pts.chunks_mut(2) {
        p[0] = (p[0] - mean[0]) / std[0];
        p[1] = (p[1] - mean[1]) / std[1];
    }
    (mean, std)
}

/// Index of the nearest center to `p`.
pub fn nearest_center(p: [f64; 2], centers: &[[f64; 2]]) -> usize {
    let d = |c: &[f64; 2]| (p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]);
    (0..centers.len())
        .min_by(|&a, &b| d(&centers[a]).total_cmp(&d(&centers[b])))
        .unwrap_or(0)
}

/// Max-likelihood single-Gaussian NLL per sample,
/// `½·log((2πe)^D · det Σ̂)`, for `[N, 2]` data.
pub fn gaussian_baseline_nll(x: &Tensor) -> Result<f64> {
    if x.rank() != 2 || x.shape()[1] != 2 {
        return Err(Error::contract("gaussian_baseline_nll", "expects [N, 2] data"));
    }
    let n = x.batch() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in x.data().chunks(2) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in x.data().chunks(2) {
        sxx += (p[0] - mx) * (p[0] - mx);
        syy += (p[1] - my) * (p[1] - my);
        sxy += (p[0] - mx) * (p[1] - my);
    }
    let det = (sxx / n) * (syy / n) - (sxy / n) * (sxy / n);
    Ok(math::LN_2PI + 1.0 + 0.5 * math::ln(det))
}

/// Synthetic `n_bits = 8` images: one soft blob per image at a random
/// position and size on a dark background, with a per-image tint when
/// `channels > 1`. Labels give the image quadrant holding the blob center.
pub fn synthetic_images(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::Data("synthetic images need non-zero extents".into()));
    }
    let mut rng = seeded(seed, streams::DATA);
    let mut data = Vec::with_capacity(n * height * width * channels);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let cy = uniform(&mut rng) * (height as f64 - 1.0);
        let cx = uniform(&mut rng) * (width as f64 - 1.0);
        let radius = 0.12 * height.min(width) as f64 * (1.0 + 1.5 * uniform(&mut rng));
        let peak = 150.0 + 100.0 * uniform(&mut rng);
        let tint: Vec<f64> = (0..channels)
            .map(|_| if channels == 1 { 1.0 } else { 0.4 + 0.6 * uniform(&mut rng) })
            .collect();
        labels.push(usize::from(cy >= height as f64 / 2.0) * 2 + usize::from(cx >= width as f64 / 2.0));
        for y in 0..height {
            for x in 0..width {
                let d2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
                let v = peak * math::exp(-d2 / (2.0 * radius * radius));
                for t in &tint {
                    let noisy = v * t + 6.0 * uniform(&mut rng);
                    data.push(math::floor(noisy).clamp(0.0, 255.0));
                }
            }
        }
    }
    Dataset::new(
        Tensor::new(&[n, height, width, channels], data)?,
        Some(labels),
        Encoding::Quantized { n_bits: 8 },
    )
}

/// Area downsampling of integer images by an integer factor, rounding the
/// block mean to the nearest integer.
pub fn downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 4 || factor == 0 || x.shape()[1] % factor != 0 || x.shape()[2] % factor != 0 {
        return Err(Error::contract(
            "downsample",
            format!("{:?} not divisible by {factor}", x.shape()),
        ));
    }
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * oh * ow * c];
    let src = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let o = ((b * oh + y / factor) * ow + xx / factor) * c + ch;
                    out[o] += src[((b * h + y) * w + xx) * c + ch];
                }
            }
        }
    }
    let area = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v = math::floor(*v / area + 0.5));
    Tensor::new(&[n, oh, ow, c], out)
}

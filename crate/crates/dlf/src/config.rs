//! Run configuration as flat `section.key = value` text.
//!
//! Resolution order is defaults, then the config file, then `--override`
//! pairs. The resolved map is written next to every run's outputs and
//! embedded in checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dlf_core::data::Toy2d;
use dlf_core::layers::Variant;
use dlf_core::model::{InputShape, ModelConfig};
use dlf_core::optim::AdamConfig;
use dlf_core::train::TrainConfig;

use crate::error::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model.mode", "flat"),
    ("model.dim", "2"),
    ("model.height", "8"),
    ("model.width", "8"),
    ("model.channels", "1"),
    ("model.levels", "1"),
    ("model.steps", "32"),
    ("model.K", "2"),
    ("model.hidden", "64"),
    ("model.n_bits", "8"),
    ("model.variant", "standard"),
    ("model.classes", "none"),
    ("model.actnorm", "false"),
    ("train.batch_size", "auto"),
    ("train.epochs", "10"),
    ("train.max_steps", "none"),
    ("train.lr", "0.005"),
    ("train.warmup", "500"),
    ("train.clip_norm", "50"),
    ("train.l2_inv1x1", "0"),
    ("train.eval_batch_size", "256"),
    ("data.source", "toy2d"),
    ("data.kind", "two_moons"),
    ("data.n", "10000"),
    ("data.path", "none"),
    ("data.labels", "none"),
    ("data.valid_fraction", "0.1"),
    ("data.downsample", "1"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Toy2d(Toy2d),
    /// Generated blob images matching the model's image shape.
    Synthetic,
    Idx { images: PathBuf, labels: Option<PathBuf> },
    TensorFile { path: PathBuf, labels: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub valid_fraction: f64,
    pub downsample: usize,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = &entries[key];
    v.parse()
        .map_err(|_| Error::Usage(format!("{key} = {v:?} is not a valid value")))
}

fn optional<T: std::str::FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    if entries[key] == "none" {
        Ok(None)
    } else {
        parse(entries, key).map(Some)
    }
}

fn optional_path(entries: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    (entries[key] != "none").then(|| PathBuf::from(&entries[key]))
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::from_pairs(std::iter::empty()).expect("defaults are valid")
    }

    /// Applies `pairs` on top of the defaults.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut entries: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            if !entries.contains_key(&k) {
                let known: Vec<&str> = DEFAULTS.iter().map(|(k, _)| *k).collect();
                return Err(Error::Usage(format!("unknown config key {k:?}; known keys: {}", known.join(", "))));
            }
            entries.insert(k, v);
        }
        Self::from_entries(entries)
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            pairs.extend(parse_pairs(&text)?);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} should be key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    /// Returns a copy with `key` set to `value`.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.entries.clone().into_iter().collect();
        pairs.push((key.to_string(), value.to_string()));
        Self::from_pairs(pairs)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Canonical text form: every key, sorted.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let seed: u64 = parse(&entries, "seed")?;
        let partitions = parse(&entries, "model.K")?;
        let input = match entries["model.mode"].as_str() {
            "flat" => InputShape::Flat {
                dim: parse(&entries, "model.dim")?,
            },
            "image" => InputShape::Image {
                height: parse(&entries, "model.height")?,
                width: parse(&entries, "model.width")?,
                channels: parse(&entries, "model.channels")?,
            },
            other => return Err(Error::Usage(format!("model.mode = {other:?}; expected flat or image"))),
        };
        let variant = match entries["model.variant"].as_str() {
            "standard" => Variant::Standard,
            "inverse" => Variant::Inverse,
            other => return Err(Error::Usage(format!("model.variant = {other:?}; expected standard or inverse"))),
        };
        let model = ModelConfig {
            input,
            levels: parse(&entries, "model.levels")?,
            steps: parse(&entries, "model.steps")?,
            partitions,
            hidden: parse(&entries, "model.hidden")?,
            n_bits: parse(&entries, "model.n_bits")?,
            variant,
            classes: optional(&entries, "model.classes")?,
            actnorm: parse(&entries, "model.actnorm")?,
            actnorm_data_init: true,
            seed,
        };
        model.validate()?;

        let batch_size = match entries["train.batch_size"].as_str() {
            "auto" if input.is_image() => 32,
            "auto" => 64,
            _ => parse(&entries, "train.batch_size")?,
        };
        if batch_size == 0 {
            return Err(Error::Usage("train.batch_size must be positive".into()));
        }
        let train = TrainConfig {
            batch_size,
            epochs: parse(&entries, "train.epochs")?,
            max_steps: optional(&entries, "train.max_steps")?,
            seed,
            adam: AdamConfig {
                lr: parse(&entries, "train.lr")?,
                warmup: parse(&entries, "train.warmup")?,
                clip_norm: optional(&entries, "train.clip_norm")?,
                l2_inv1x1: parse(&entries, "train.l2_inv1x1")?,
                ..AdamConfig::default()
            },
            eval_batch_size: parse(&entries, "train.eval_batch_size")?,
        };

        let source = match entries["data.source"].as_str() {
            "toy2d" => DataSource::Toy2d(
                Toy2d::parse(&entries["data.kind"])
                    .ok_or_else(|| Error::Usage(format!("data.kind = {:?} is not a toy set", entries["data.kind"])))?,
            ),
            "synthetic" => DataSource::Synthetic,
            "idx" => DataSource::Idx {
                images: optional_path(&entries, "data.path")
                    .ok_or_else(|| Error::Usage("data.source = idx needs data.path".into()))?,
                labels: optional_path(&entries, "data.labels"),
            },
            "tensor" => DataSource::TensorFile {
                path: optional_path(&entries, "data.path")
                    .ok_or_else(|| Error::Usage("data.source = tensor needs data.path".into()))?,
                labels: optional_path(&entries, "data.labels"),
            },
            other => return Err(Error::Usage(format!("data.source = {other:?} is not recognized"))),
        };
        let data = DataConfig {
            source,
            n: parse(&entries, "data.n")?,
            valid_fraction: parse(&entries, "data.valid_fraction")?,
            downsample: parse(&entries, "data.downsample")?,
        };
        Ok(RunConfig {
            entries,
            seed,
            model,
            train,
            data,
        })
    }
}

/// Reads `DLF_THREADS`, defaulting to 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("DLF_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Usage(format!("DLF_THREADS = {v:?} must be a positive integer"))),
        },
    }
}

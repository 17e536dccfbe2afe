//! Builds the train/validation datasets a run config describes.

use dlf_core::data::{self, Dataset, Encoding};
use dlf_core::model::InputShape;
use dlf_core::rng::streams;

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::{idx, tensor_file};

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Option<Dataset>,
}

fn check_shape(x: &dlf_core::Tensor, input: InputShape) -> Result<()> {
    let ok = match input {
        InputShape::Flat { dim } => x.rank() == 2 && x.shape()[1] == dim,
        InputShape::Image { height, width, channels } => x.rank() == 4 && x.shape()[1..] == [height, width, channels],
    };
    if !ok {
        return Err(Error::Usage(format!(
            "data of shape {:?} does not fit the model input {input:?}",
            x.shape()
        )));
    }
    Ok(())
}

pub fn load(cfg: &RunConfig) -> Result<Splits> {
    let input = cfg.model.input;
    let seed = cfg.seed;
    let n_bits = cfg.model.n_bits;
    let full = match &cfg.data.source {
        DataSource::Toy2d(kind) => {
            if input != (InputShape::Flat { dim: 2 }) {
                return Err(Error::Usage("toy2d data needs model.mode = flat and model.dim = 2".into()));
            }
            data::toy2d(*kind, cfg.data.n, seed)?.data
        }
        DataSource::Synthetic => {
            let InputShape::Image { height, width, channels } = input else {
                return Err(Error::Usage("synthetic images need model.mode = image".into()));
            };
            if n_bits != 8 {
                return Err(Error::Usage("synthetic images are 8-bit".into()));
            }
            data::synthetic_images(cfg.data.n, height, width, channels, seed)?
        }
        DataSource::Idx { images, labels } => {
            let mut x = idx::load_images(images)?;
            if cfg.data.downsample > 1 {
                x = data::downsample(&x, cfg.data.downsample)?;
            }
            check_shape(&x, input)?;
            let labels = labels.as_deref().map(idx::load_labels).transpose()?;
            Dataset::new(x, labels, Encoding::Quantized { n_bits: 8 })?
        }
        DataSource::TensorFile { path, labels } => {
            let (x, dtype) = tensor_file::read(path)?;
            check_shape(&x, input)?;
            let labels = labels.as_deref().map(idx::load_labels).transpose()?;
            let encoding = match dtype {
                tensor_file::DType::U8 => Encoding::Quantized { n_bits },
                tensor_file::DType::F64 => Encoding::Continuous,
            };
            Dataset::new(x, labels, encoding)?
        }
    };
    if let Some(k) = cfg.model.classes {
        match &full.labels {
            None => return Err(Error::Usage("a conditional model needs labelled data".into())),
            Some(l) => {
                if let Some(bad) = l.iter().position(|&v| v >= k) {
                    return Err(Error::Usage(format!("label {} at row {bad} exceeds model.classes = {k}", l[bad])));
                }
            }
        }
    }
    if cfg.data.valid_fraction == 0.0 {
        if input.is_image() {
            return Err(Error::Usage("image runs need a validation split (data.valid_fraction > 0)".into()));
        }
        return Ok(Splits { train: full, valid: None });
    }
    let (train, valid) = full.split(cfg.data.valid_fraction, seed ^ streams::SPLIT)?;
    Ok(Splits {
        train,
        valid: Some(valid),
    })
}

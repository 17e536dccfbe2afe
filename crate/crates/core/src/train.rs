//! The training loop. Logging and persistence are left to a
//! [`TrainObserver`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{one_hot, Model};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{seeded, streams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Batch size used for validation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 1,
            max_steps: None,
            seed: 0,
            adam: AdamConfig::default(),
            eval_batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Index of the step that produced this record.
    pub step: u64,
    pub epoch: u64,
    /// Objective value: mean NLL per dimension in nats.
    pub loss: f64,
    /// Mean NLL per sample in nats.
    pub nll_nats: f64,
    pub bits_per_dim: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: u64,
    pub nll_nats: f64,
    pub bits_per_dim: Option<f64>,
}

/// Hooks called by [`Trainer::run`]. Errors abort training.
pub trait TrainObserver {
    fn on_step(&mut self, _trainer: &Trainer, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch with the validation result, if a
    /// validation set was supplied.
    fn on_epoch(&mut self, _trainer: &Trainer, _valid: Option<&EvalRecord>, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects step records in memory.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, _: &Trainer, record: &StepRecord) -> Result<()> {
        self.steps.push(*record);
        Ok(())
    }

    fn on_epoch(&mut self, _: &Trainer, valid: Option<&EvalRecord>, _: bool) -> Result<()> {
        self.evals.extend(valid.copied());
        Ok(())
    }
}

/// Position in the schedule; together with the model and optimizer this is
/// everything needed to resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optim: Adam,
    pub config: TrainConfig,
    pub progress: Progress,
    pub best_valid: Option<f64>,
}

fn condition(model: &Model, labels: Option<&[usize]>) -> Result<Option<Tensor>> {
    match (model.config().classes, labels) {
        (Some(k), Some(l)) => Ok(Some(one_hot(l, k)?)),
        (Some(_), None) => Err(Error::Data("conditional model needs labelled data".into())),
        (None, _) => Ok(None),
    }
}

/// Mean validation NLL with fixed per-batch dequantization streams, so the
/// result depends only on the model and data.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, seed: u64) -> Result<(f64, Option<f64>)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    for (i, idx) in data.eval_batches(batch_size).iter().enumerate() {
        let mut rng = seeded(seed, streams::VALID_DEQUANT + i as u64);
        let (x, labels) = data.model_input(idx, &mut rng)?;
        let cond = condition(model, labels.as_deref())?;
        let ll = model.log_likelihood(&x, cond.as_ref())?;
        total += ll.nll.iter().sum::<f64>();
    }
    let nll = total / data.len() as f64;
    let bpd = model.config().input.is_image().then(|| model.bits_per_dim(nll));
    Ok((nll, bpd))
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let optim = Adam::new(config.adam, model.params());
        Trainer {
            model,
            optim,
            config,
            progress: Progress::default(),
            best_valid: None,
        }
    }

    fn finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    fn diagnostics(&self, x: &Tensor, cond: Option<&Tensor>) -> String {
        match self.model.layer_logdets(x, cond) {
            Ok(lds) => {
                let mut worst = String::from("none");
                let mut worst_abs = -1.0;
                for (name, v) in &lds {
                    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                    if !mean.is_finite() || mean.abs() > worst_abs {
                        worst_abs = if mean.is_finite() { mean.abs() } else { f64::INFINITY };
                        worst = format!("{name} = {mean}");
                    }
                }
                let max_s = self
                    .model
                    .loss_and_grads(x, cond)
                    .map(|r| format!("{}", r.max_scale))
                    .unwrap_or_else(|e| format!("unavailable ({e})"));
                format!("largest layer log-det {worst}; max |s| = {max_s}")
            }
            Err(e) => format!("forward pass failed: {e}"),
        }
    }

    /// One optimizer step on the rows `indices` of `data`.
    pub fn step_on(&mut self, data: &Dataset, indices: &[usize]) -> Result<StepRecord> {
        let step = self.progress.step;
        let mut rng = seeded(self.config.seed, streams::TRAIN_DEQUANT_BASE + step);
        let (x, labels) = data.model_input(indices, &mut rng)?;
        let cond = condition(&self.model, labels.as_deref())?;
        if !self.model.is_initialized() {
            self.model.data_init(&x, cond.as_ref())?;
        }
        let out = match self.model.loss_and_grads(&x, cond.as_ref()) {
            Ok(out) => out,
            Err(Error::Numeric { layer, detail }) => {
                return Err(Error::Numeric {
                    layer,
                    detail: format!("step {step}: {detail}; {}", self.diagnostics(&x, cond.as_ref())),
                })
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            return Err(Error::Numeric {
                layer: "loss".into(),
                detail: format!("step {step}: non-finite loss; {}", self.diagnostics(&x, cond.as_ref())),
            });
        }
        let mut grads = out.grads;
        let report = self.optim.step(self.model.params_mut(), &mut grads)?;
        self.progress.step += 1;
        let nll_nats = out.nll.iter().sum::<f64>() / out.nll.len() as f64;
        Ok(StepRecord {
            step,
            epoch: self.progress.epoch,
            loss: out.loss,
            nll_nats,
            bits_per_dim: self.model.config().input.is_image().then(|| self.model.bits_per_dim(nll_nats)),
            grad_norm: report.grad_norm,
            clipped: report.clipped,
            lr: report.lr,
        })
    }

    /// Trains until `epochs` or `max_steps` is reached, resuming from the
    /// current progress.
    pub fn run(&mut self, train: &Dataset, valid: Option<&Dataset>, observer: &mut dyn TrainObserver) -> Result<()> {
        if train.len() < self.config.batch_size {
            return Err(Error::Data(format!(
                "{} training samples is less than one batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        while !self.finished() {
            let order = train.batch_order(self.config.batch_size, self.config.seed, self.progress.epoch);
            while (self.progress.batch_in_epoch as usize) < order.len() {
                if self.finished() {
                    return Ok(());
                }
                let idx = &order[self.progress.batch_in_epoch as usize];
                let record = self.step_on(train, idx)?;
                self.progress.batch_in_epoch += 1;
                observer.on_step(self, &record)?;
            }
            let eval = match valid {
                Some(v) => {
                    let (nll, bpd) = evaluate(&self.model, v, self.config.eval_batch_size, self.config.seed)?;
                    Some(EvalRecord {
                        step: self.progress.step,
                        epoch: self.progress.epoch,
                        nll_nats: nll,
                        bits_per_dim: bpd,
                    })
                }
                None => None,
            };
            let is_best = match (&eval, self.best_valid) {
                (Some(e), Some(b)) => e.nll_nats < b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if is_best {
                self.best_valid = eval.map(|e| e.nll_nats);
            }
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
            observer.on_epoch(self, eval.as_ref(), is_best)?;
        }
        Ok(())
    }
}

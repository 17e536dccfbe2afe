//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dlf_core::data::dequantize;
use dlf_core::model::{one_hot, Model};
use dlf_core::rng::{seeded, streams};
use dlf_core::train::{evaluate, EvalRecord, StepRecord, TrainObserver, Trainer};
use dlf_core::Tensor;

use crate::bench::report_timing;
use crate::config::{threads_from_env, RunConfig};
use crate::error::{Error, Result};
use crate::image::write_image_grid;
use crate::log::{LogRecord, LogWriter};
use crate::tensor_file::{self, DType};
use crate::{checkpoint, dataset, suites};

#[derive(Debug, Parser)]
#[command(name = "dlf", version, about = "Train and use dynamic linear flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (train, eval, bench, verify) or file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing logs and checkpoints to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Draw samples; images become a PGM/PPM grid, vectors a tensor file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Class for conditional models.
        #[arg(long)]
        label: Option<usize>,
    },
    /// Map a tensor file of inputs to latents.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Map a tensor file of latents back to inputs.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Decode a straight line between the latents of the first two inputs.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Run the numeric verification suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run every suite (the default set).
        #[arg(long)]
        all: bool,
        /// Seeds per configuration.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Measure decode latency.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; without it a fresh model from the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16])]
        batch_sizes: Vec<usize>,
    },
}

fn with_seed(common: &Common) -> Vec<String> {
    let mut o = common.overrides.clone();
    if let Some(s) = common.seed {
        o.push(format!("seed={s}"));
    }
    o
}

fn resolve(common: &Common) -> Result<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), &with_seed(common))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out <DIR> is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn out_file(common: &Common) -> Result<PathBuf> {
    let path = common
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out <FILE> is required".into()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(path)
}

fn write_config(path: &Path, cfg: &RunConfig, threads: usize) -> Result<()> {
    let text = format!("{}# DLF_THREADS = {threads}\n", cfg.to_text());
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Config written beside a single output file.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config");
    path.with_file_name(name)
}

/// Loads a checkpoint, applying command-line overrides to non-model keys.
fn load_ckpt(path: &Path, common: &Common) -> Result<(RunConfig, Trainer)> {
    let (mut cfg, trainer) = checkpoint::load(path)?;
    for o in with_seed(common) {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {o:?} should be key=value")))?;
        if k.trim().starts_with("model.") {
            return Err(Error::Usage(format!("{k} is fixed by the checkpoint")));
        }
        cfg = cfg.with(k.trim(), v.trim())?;
    }
    Ok((cfg, trainer))
}

fn condition(model: &Model, label: Option<usize>, n: usize) -> Result<Option<Tensor>> {
    match (model.config().classes, label) {
        (Some(k), Some(l)) => Ok(Some(one_hot(&vec![l; n], k)?)),
        (Some(_), None) => Err(Error::Usage("conditional model: pass --label".into())),
        (None, Some(_)) => Err(Error::Usage("--label given for an unconditional model".into())),
        (None, None) => Ok(None),
    }
}

/// Reads model inputs; integer (u8) files are dequantized with `seed`.
fn read_inputs(path: &Path, model: &Model, seed: u64) -> Result<Tensor> {
    let (x, dtype) = tensor_file::read(path)?;
    Ok(match dtype {
        DType::U8 => dequantize(&x, model.config().n_bits, &mut seeded(seed, streams::DATA))?,
        DType::F64 => x,
    })
}

/// Writes model-space outputs: a PGM/PPM grid for `.pgm`/`.ppm` paths,
/// otherwise an f64 tensor file.
fn write_outputs(path: &Path, x: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") => write_image_grid(x, path),
        _ => tensor_file::write(path, x, DType::F64),
    }
}

struct RunLog {
    dir: PathBuf,
    config: RunConfig,
    log: LogWriter,
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, _: &Trainer, r: &StepRecord) -> dlf_core::Result<()> {
        self.log
            .write(&LogRecord::from(r))
            .map_err(|e| dlf_core::Error::Data(e.to_string()))?;
        if r.clipped {
            eprintln!("step {}: gradient norm {:.3} clipped", r.step, r.grad_norm);
        }
        Ok(())
    }

    fn on_epoch(&mut self, t: &Trainer, valid: Option<&EvalRecord>, is_best: bool) -> dlf_core::Result<()> {
        let io = |e: Error| dlf_core::Error::Data(e.to_string());
        if let Some(v) = valid {
            self.log.write(&LogRecord::eval(v, "valid")).map_err(io)?;
            eprintln!(
                "epoch {}: valid nll {:.5} nats{}",
                v.epoch,
                v.nll_nats,
                v.bits_per_dim.map(|b| format!(", {b:.5} bits/dim")).unwrap_or_default()
            );
        }
        checkpoint::save(&self.dir.join("last.dlfc"), &self.config, t).map_err(io)?;
        if is_best {
            checkpoint::save(&self.dir.join("best.dlfc"), &self.config, t).map_err(io)?;
        }
        Ok(())
    }
}

fn train(common: &Common, resume: Option<&Path>, threads: usize) -> Result<()> {
    let dir = out_dir(common)?;
    let (cfg, mut trainer) = match resume {
        Some(p) => {
            let (cfg, mut t) = load_ckpt(p, common)?;
            t.config = cfg.train;
            (cfg, t)
        }
        None => {
            let cfg = resolve(common)?;
            let model = Model::new(cfg.model.clone())?;
            let t = Trainer::new(model, cfg.train);
            (cfg, t)
        }
    };
    write_config(&dir.join("config.txt"), &cfg, threads)?;
    let splits = dataset::load(&cfg)?;
    let mut observer = RunLog {
        dir: dir.clone(),
        config: cfg.clone(),
        log: LogWriter::append(&dir.join("train.ndjson"))?,
    };
    if trainer.progress.step == 0 {
        checkpoint::save(&dir.join("init.dlfc"), &cfg, &trainer)?;
    }
    trainer.run(&splits.train, splits.valid.as_ref(), &mut observer)?;
    checkpoint::save(&dir.join("last.dlfc"), &cfg, &trainer)?;
    println!(
        "trained {} steps over {} epochs; outputs in {}",
        trainer.progress.step,
        trainer.progress.epoch,
        dir.display()
    );
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, threads: usize) -> Result<()> {
    let dir = out_dir(common)?;
    let (cfg, trainer) = load_ckpt(ckpt, common)?;
    write_config(&dir.join("config.txt"), &cfg, threads)?;
    let splits = dataset::load(&cfg)?;
    let (data, split) = match &splits.valid {
        Some(v) => (v, "valid"),
        None => (&splits.train, "train"),
    };
    let (nll, bpd) = evaluate(&trainer.model, data, cfg.train.eval_batch_size, cfg.train.seed)?;
    let record = EvalRecord {
        step: trainer.progress.step,
        epoch: trainer.progress.epoch.saturating_sub(1),
        nll_nats: nll,
        bits_per_dim: bpd,
    };
    LogWriter::append(&dir.join("eval.ndjson"))?.write(&LogRecord::eval(&record, split))?;
    println!(
        "{split}: nll {nll:.6} nats{}",
        bpd.map(|b| format!(", {b:.6} bits/dim")).unwrap_or_default()
    );
    Ok(())
}

fn verify(common: &Common, seeds: u64, threads: usize) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let checks = suites::run_all(seeds, seed)?;
    let mut log = match &common.out {
        Some(_) => {
            let dir = out_dir(common)?;
            write_config(&dir.join("config.txt"), &resolve(common)?, threads)?;
            Some(LogWriter::append(&dir.join("verify.ndjson"))?)
        }
        None => None,
    };
    for c in &checks {
        println!("{}", c.summary());
        if let Some(l) = log.as_mut() {
            l.write(&LogRecord {
                step: c.trials as u64,
                split: "verify".into(),
                check: Some(c.name.clone()),
                value: Some(c.worst),
                passed: Some(c.passed()),
                ..LogRecord::default()
            })?;
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(failed.join(", ")))
    }
}

/// Parses arguments and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    let threads = threads_from_env()?;
    match command {
        Command::Train { common, resume } => train(&common, resume.as_deref(), threads),
        Command::Eval { common, ckpt } => eval(&common, &ckpt, threads),
        Command::Sample {
            common,
            ckpt,
            n,
            temperature,
            label,
        } => {
            let out = out_file(&common)?;
            let (cfg, t) = load_ckpt(&ckpt, &common)?;
            if !temperature.is_finite() || temperature < 0.0 {
                return Err(Error::Usage(format!("--temperature {temperature} must be finite and non-negative")));
            }
            let cond = condition(&t.model, label, n)?;
            let mut rng = seeded(cfg.seed, streams::SAMPLE);
            let (x, _) = t.model.sample(n, temperature, cond.as_ref(), &mut rng)?;
            write_config(&sidecar(&out), &cfg, threads)?;
            write_outputs(&out, &x)
        }
        Command::Encode {
            common,
            ckpt,
            input,
            label,
        } => {
            let out = out_file(&common)?;
            let (cfg, t) = load_ckpt(&ckpt, &common)?;
            let x = read_inputs(&input, &t.model, cfg.seed)?;
            let cond = condition(&t.model, label, x.batch())?;
            let z = t.model.encode(&x, cond.as_ref())?;
            write_config(&sidecar(&out), &cfg, threads)?;
            tensor_file::write(&out, &z, DType::F64)
        }
        Command::Decode {
            common,
            ckpt,
            input,
            label,
        } => {
            let out = out_file(&common)?;
            let (cfg, t) = load_ckpt(&ckpt, &common)?;
            let (z, _) = tensor_file::read(&input)?;
            let cond = condition(&t.model, label, z.batch())?;
            let x = t.model.decode(&z, cond.as_ref())?;
            write_config(&sidecar(&out), &cfg, threads)?;
            write_outputs(&out, &x)
        }
        Command::Interpolate {
            common,
            ckpt,
            input,
            steps,
            label,
        } => {
            let out = out_file(&common)?;
            let (cfg, t) = load_ckpt(&ckpt, &common)?;
            let x = read_inputs(&input, &t.model, cfg.seed)?;
            if x.batch() < 2 {
                return Err(Error::Usage("interpolation needs an input file with at least two rows".into()));
            }
            let cond = condition(&t.model, label, 1)?;
            let frames = t.model.interpolate(&x.rows(0, 1), &x.rows(1, 1), steps, cond.as_ref())?;
            write_config(&sidecar(&out), &cfg, threads)?;
            write_outputs(&out, &Tensor::stack_rows(&frames)?)
        }
        Command::Verify { common, all: _, seeds } => verify(&common, seeds, threads),
        Command::Bench {
            common,
            ckpt,
            runs,
            warmup,
            batch_sizes,
        } => {
            let dir = out_dir(&common)?;
            let (cfg, model) = match ckpt {
                Some(p) => {
                    let (cfg, t) = load_ckpt(&p, &common)?;
                    (cfg, t.model)
                }
                None => {
                    let cfg = resolve(&common)?;
                    let m = Model::new(cfg.model.clone())?;
                    (cfg, m)
                }
            };
            write_config(&dir.join("config.txt"), &cfg, threads)?;
            let rows = report_timing(&model, &batch_sizes, runs, warmup, cfg.seed)?;
            let mut log = LogWriter::append(&dir.join("bench.ndjson"))?;
            println!("{:>10} {:>12} {:>12}", "batch", "median ms", "p95 ms");
            for r in &rows {
                println!("{:>10} {:>12.3} {:>12.3}", r.batch_size, r.median_ms, r.p95_ms);
                log.write(&LogRecord {
                    split: "bench".into(),
                    check: Some("decode".into()),
                    batch_size: Some(r.batch_size),
                    median_ms: Some(r.median_ms),
                    p95_ms: Some(r.p95_ms),
                    ..LogRecord::default()
                })?;
            }
            Ok(())
        }
    }
}

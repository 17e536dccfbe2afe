//! Newline-delimited JSON run logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dlf_core::train::{EvalRecord, StepRecord};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub nll_nats: Option<f64>,
    pub bits_per_dim: Option<f64>,
    pub grad_norm: Option<f64>,
    pub lr: Option<f64>,
    /// Set on training records; true when gradient clipping was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p95_ms: Option<f64>,
}

impl From<&StepRecord> for LogRecord {
    fn from(r: &StepRecord) -> Self {
        LogRecord {
            step: r.step,
            epoch: r.epoch,
            split: "train".into(),
            nll_nats: Some(r.nll_nats),
            bits_per_dim: r.bits_per_dim,
            grad_norm: Some(r.grad_norm),
            lr: Some(r.lr),
            clipped: Some(r.clipped),
            ..LogRecord::default()
        }
    }
}

impl LogRecord {
    pub fn eval(r: &EvalRecord, split: &str) -> Self {
        LogRecord {
            step: r.step,
            epoch: r.epoch,
            split: split.into(),
            nll_nats: Some(r.nll_nats),
            bits_per_dim: r.bits_per_dim,
            ..LogRecord::default()
        }
    }
}

pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    /// Opens `path` for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::format("log", e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("log", format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let rec = LogRecord {
            step: 3,
            split: "valid".into(),
            nll_nats: Some(1.25),
            ..LogRecord::default()
        };
        let mut w = LogWriter::append(&path).unwrap();
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        assert_eq!(read_log(&path).unwrap(), vec![rec.clone(), rec]);
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["step", "epoch", "split", "nll_nats", "bits_per_dim", "grad_norm", "lr"] {
            assert!(text.lines().next().unwrap().contains(&format!("\"{key}\"")));
        }
    }
}

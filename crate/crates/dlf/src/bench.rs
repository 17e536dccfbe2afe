//! Decode latency measurement.

use std::time::Instant;

use dlf_core::model::{one_hot, Model};
use dlf_core::rng::{seeded, streams};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub batch_size: usize,
    /// Median wall time to decode one whole batch.
    pub median_ms: f64,
    pub p95_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Times `runs` decodes per batch size after `warmup` untimed ones.
pub fn report_timing(model: &Model, batch_sizes: &[usize], runs: usize, warmup: usize, seed: u64) -> Result<Vec<TimingRow>> {
    if runs == 0 {
        return Err(Error::Usage("timing needs at least one run".into()));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Usage("batch sizes must be positive".into()));
    }
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let cond = model.config().classes.map(|k| one_hot(&vec![0; b], k)).transpose()?;
        let mut rng = seeded(seed, streams::SAMPLE);
        let (_, z) = model.sample(b, 1.0, cond.as_ref(), &mut rng)?;
        let mut times = Vec::with_capacity(runs);
        for i in 0..warmup + runs {
            let start = Instant::now();
            std::hint::black_box(model.decode(std::hint::black_box(&z), cond.as_ref())?);
            if i >= warmup {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        times.sort_by(f64::total_cmp);
        rows.push(TimingRow {
            batch_size: b,
            median_ms: percentile(&times, 0.5),
            p95_ms: percentile(&times, 0.95),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlf_core::model::ModelConfig;

    #[test]
    fn zero_runs_is_usage_error() {
        let m = Model::new(ModelConfig::flat(2, 2).with_steps(1).with_hidden(2)).unwrap();
        assert!(matches!(report_timing(&m, &[1], 0, 0, 0), Err(Error::Usage(_))));
        assert_eq!(report_timing(&m, &[1, 2], 3, 1, 0).unwrap().len(), 2);
    }
}

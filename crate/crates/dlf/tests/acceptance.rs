//! Acceptance suite: ten end-to-end criteria, one status line each.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed
//! whether or not it passes; the process fails if any criterion fails.

use std::time::Instant;

use dlf::bench::report_timing;
use dlf::checkpoint;
use dlf::config::{threads_from_env, RunConfig};
use dlf::suites;
use dlf_core::data::{gaussian_baseline_nll, nearest_center, synthetic_images, toy2d, Dataset, Toy2d};
use dlf_core::model::{gaussian_cross_entropy, one_hot, Model, ModelConfig};
use dlf_core::optim::AdamConfig;
use dlf_core::rng::{seeded, streams};
use dlf_core::train::{evaluate, Recorder, TrainConfig, Trainer};
use dlf_core::verify::randomize_params;
use dlf_core::Tensor;

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = fn() -> Result<Outcome, String>;

fn outcome(passed: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { passed, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn train_config(batch_size: usize, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs: u64::MAX,
        max_steps: Some(steps),
        seed,
        adam: AdamConfig::default(),
        eval_batch_size: 500,
    }
}

fn invertibility() -> Result<Outcome, String> {
    let (layers, models) = suites::roundtrip_matrix(20, 0).map_err(err)?;
    outcome(
        layers.passed() && models.passed(),
        format!("{}; {}", layers.summary(), models.summary()),
    )
}

fn logdet_oracle() -> Result<Outcome, String> {
    let (logdet, structure) = suites::logdet_oracle(20, 0).map_err(err)?;
    outcome(
        logdet.passed() && structure.passed(),
        format!("{}; {}", logdet.summary(), structure.summary()),
    )
}

fn gradient_oracle() -> Result<Outcome, String> {
    let check = suites::gradient_oracle(200, 3).map_err(err)?;
    outcome(check.passed(), check.summary())
}

fn identity_init_nll() -> Result<Outcome, String> {
    let data = synthetic_images(32, 8, 8, 1, 4).map_err(err)?;
    let idx: Vec<usize> = (0..32).collect();
    let (x, _) = data.model_input(&idx, &mut seeded(4, streams::VALID_DEQUANT)).map_err(err)?;
    let mut worst: f64 = 0.0;
    for k in [1, 2, 4] {
        let model = Model::new(ModelConfig::image(8, 8, 1, 2, k).with_steps(4).with_hidden(16).with_seed(k as u64)).map_err(err)?;
        let ll = model.log_likelihood(&x, None).map_err(err)?;
        for (a, b) in ll.nll.iter().zip(gaussian_cross_entropy(&x)) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max |nll - cross-entropy| = {worst:.3e} (tol 1e-6)"))
}

fn toy_density() -> Result<Outcome, String> {
    let data = toy2d(Toy2d::TwoMoons, 10_000, 0).map_err(err)?.data;
    let (train, valid) = data.split(0.1, 1).map_err(err)?;
    let model = Model::new(ModelConfig::flat(2, 2).with_steps(8).with_seed(0)).map_err(err)?;
    let mut t = Trainer::new(model, train_config(64, 5000, 0));
    t.run(&train, None, &mut ()).map_err(err)?;
    let (nll, _) = evaluate(&t.model, &valid, 500, 0).map_err(err)?;
    let baseline = gaussian_baseline_nll(&valid.x).map_err(err)?;
    outcome(
        nll < baseline - 0.2,
        format!("held-out nll {nll:.4} vs Gaussian baseline {baseline:.4} (need margin >= 0.2)"),
    )
}

fn image_bits_per_dim() -> Result<Outcome, String> {
    let data = synthetic_images(4000, 8, 8, 1, 6).map_err(err)?;
    let (train, valid) = data.split(0.1, 6).map_err(err)?;
    let model = Model::new(ModelConfig::image(8, 8, 1, 2, 2).with_steps(4).with_hidden(32).with_seed(6)).map_err(err)?;
    let (_, start) = evaluate(&model, &valid, 200, 6).map_err(err)?;
    let mut t = Trainer::new(model, train_config(32, 2000, 6));
    t.run(&train, None, &mut ()).map_err(err)?;
    let (_, end) = evaluate(&t.model, &valid, 200, 6).map_err(err)?;
    let (start, end) = (start.unwrap(), end.unwrap());
    outcome(
        end < 8.0 && start - end >= 1.0,
        format!("valid bits/dim {start:.4} -> {end:.4} (need < 8 and a drop >= 1)"),
    )
}

/// Hidden width for `k` partitions whose parameter count is closest to
/// `target`.
fn matched_hidden(base: &ModelConfig, k: usize, target: usize) -> Result<(usize, usize), String> {
    let mut best = (0, usize::MAX, 0);
    for c in 1..=128 {
        let cfg = ModelConfig { partitions: k, hidden: c, ..base.clone() };
        let n = Model::new(cfg).map_err(err)?.num_parameters();
        let gap = n.abs_diff(target);
        if gap < best.1 {
            best = (c, gap, n);
        }
    }
    Ok((best.0, best.2))
}

fn k_effect() -> Result<Outcome, String> {
    let data = synthetic_images(3000, 8, 8, 3, 8).map_err(err)?;
    let (train, valid) = data.split(0.1, 8).map_err(err)?;
    let base = ModelConfig::image(8, 8, 3, 2, 2).with_steps(4).with_hidden(32).with_seed(8);
    let target = Model::new(base.clone()).map_err(err)?.num_parameters();
    let (c6, n6) = matched_hidden(&base, 6, target)?;
    let run = |cfg: ModelConfig| -> Result<f64, String> {
        let mut t = Trainer::new(Model::new(cfg).map_err(err)?, train_config(32, 1500, 8));
        t.run(&train, None, &mut ()).map_err(err)?;
        Ok(evaluate(&t.model, &valid, 200, 8).map_err(err)?.1.unwrap())
    };
    let (k2, k6) = std::thread::scope(|s| {
        let a = s.spawn(|| run(base.clone()));
        let b = s.spawn(|| run(ModelConfig { partitions: 6, hidden: c6, ..base.clone() }));
        (a.join().unwrap(), b.join().unwrap())
    });
    let (k2, k6) = (k2?, k6?);
    outcome(
        k2 <= k6 + 0.02,
        format!("valid bits/dim K=2 (c=32, {target} params) {k2:.4} vs K=6 (c={c6}, {n6} params) {k6:.4}"),
    )
}

fn conditional() -> Result<Outcome, String> {
    let toy = toy2d(Toy2d::EightGaussians, 8000, 10).map_err(err)?;
    let centers = toy.centers.clone().unwrap();
    let (train, valid) = toy.data.split(0.1, 10).map_err(err)?;
    let fit = |classes: Option<usize>| -> Result<(Model, f64), String> {
        let cfg = ModelConfig::flat(2, 2).with_steps(8).with_hidden(32).with_classes(classes).with_seed(10);
        let mut t = Trainer::new(Model::new(cfg).map_err(err)?, train_config(64, 3000, 10));
        t.run(&train, None, &mut ()).map_err(err)?;
        let (nll, _) = evaluate(&t.model, &valid, 500, 10).map_err(err)?;
        Ok((t.model, nll))
    };
    let (cond, uncond) = std::thread::scope(|s| {
        let a = s.spawn(|| fit(Some(8)));
        let b = s.spawn(|| fit(None));
        (a.join().unwrap(), b.join().unwrap())
    });
    let ((model, cond_nll), (_, uncond_nll)) = (cond?, uncond?);
    let per_class = 250;
    let mut hits = 0;
    for label in 0..8 {
        let h = one_hot(&vec![label; per_class], 8).map_err(err)?;
        let mut rng = seeded(10 + label as u64, streams::SAMPLE);
        let (x, _) = model.sample(per_class, 0.7, Some(&h), &mut rng).map_err(err)?;
        hits += x.data().chunks(2).filter(|p| nearest_center([p[0], p[1]], &centers) == label).count();
    }
    let accuracy = hits as f64 / (8 * per_class) as f64;
    outcome(
        cond_nll <= uncond_nll && accuracy >= 0.9,
        format!("nll conditional {cond_nll:.4} vs unconditional {uncond_nll:.4}; T=0.7 nearest-center accuracy {:.1}%", 100.0 * accuracy),
    )
}

fn determinism() -> Result<Outcome, String> {
    let threads = threads_from_env().map_err(err)?;
    let cfg = RunConfig::resolve(
        None,
        &[
            "seed=12".into(),
            "model.steps=4".into(),
            "model.hidden=16".into(),
            "model.actnorm=true".into(),
            "data.n=2000".into(),
            "train.warmup=20".into(),
        ],
    )
    .map_err(err)?;
    let data: Dataset = toy2d(Toy2d::TwoMoons, 2000, 12).map_err(err)?.data;
    let losses = |steps: u64, from: Option<Trainer>| -> Result<(Vec<u64>, Trainer), String> {
        let mut t = from.unwrap_or_else(|| Trainer::new(Model::new(cfg.model.clone()).unwrap(), cfg.train));
        t.config.max_steps = Some(steps);
        let mut rec = Recorder::default();
        t.run(&data, None, &mut rec).map_err(err)?;
        Ok((rec.steps.iter().map(|r| r.loss.to_bits()).collect(), t))
    };
    let (a, _) = losses(80, None)?;
    let (b, _) = losses(80, None)?;
    let (first, half) = losses(45, None)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.dlfc");
    checkpoint::save(&path, &cfg, &half).map_err(err)?;
    let (_, restored) = checkpoint::load(&path).map_err(err)?;
    let (second, _) = losses(80, Some(restored))?;
    let resumed: Vec<u64> = first.into_iter().chain(second).collect();
    outcome(
        threads == 1 && a == b && a == resumed,
        format!(
            "DLF_THREADS={threads}; repeat identical: {}; save at step 45 and resume identical: {} ({} steps)",
            a == b,
            a == resumed,
            a.len()
        ),
    )
}

fn sampling_mechanics() -> Result<Outcome, String> {
    let mut model = Model::new(ModelConfig::image(8, 8, 1, 2, 2).with_steps(4).with_hidden(16).with_seed(14)).map_err(err)?;
    randomize_params(model.params_mut(), 0.2, &mut seeded(14, 0));
    let rows = report_timing(&model, &[1, 8], 30, 5, 14).map_err(err)?;
    let timed = rows.len() == 2 && rows.iter().all(|r| r.median_ms > 0.0 && r.p95_ms >= r.median_ms);

    let (x, z) = model.sample(16, 1.0, None, &mut seeded(14, streams::SAMPLE)).map_err(err)?;
    let latent_err = model.encode(&x, None).map_err(err)?.max_abs_diff(&z);

    let data = synthetic_images(2, 8, 8, 1, 14).map_err(err)?;
    let (imgs, _) = data.model_input(&[0, 1], &mut seeded(14, streams::DATA)).map_err(err)?;
    let (a, b) = (imgs.rows(0, 1), imgs.rows(1, 1));
    let frames = model.interpolate(&a, &b, 7, None).map_err(err)?;
    let endpoint_err = frames[0].max_abs_diff(&a).max(frames[6].max_abs_diff(&b));
    let grid = Tensor::stack_rows(&frames).map_err(err)?;
    let pgm = dlf::image::encode_grid(&grid).map_err(err)?;

    outcome(
        timed && latent_err <= 1e-6 && endpoint_err <= 1e-6 && !pgm.is_empty(),
        format!(
            "decode median {:.3} ms (batch 1), {:.3} ms (batch 8); latent recovery {latent_err:.2e}; interpolation endpoints {endpoint_err:.2e}",
            rows[0].median_ms, rows[1].median_ms
        ),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("1 invertibility", invertibility),
        ("2 log-determinant oracle", logdet_oracle),
        ("3 gradient oracle", gradient_oracle),
        ("4 identity-initialization NLL", identity_init_nll),
        ("5 toy density training", toy_density),
        ("6 image bits/dim", image_bits_per_dim),
        ("7 K-effect trend", k_effect),
        ("8 conditional flow", conditional),
        ("9 determinism and persistence", determinism),
        ("10 sampling mechanics", sampling_mechanics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let results: Vec<(&str, Result<Outcome, String>, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .filter(|(name, _)| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str())))
            .map(|&(name, f)| {
                s.spawn(move || {
                    let start = Instant::now();
                    let r = f();
                    (name, r, start.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut failed = 0;
    for (name, result, secs) in &results {
        let (status, detail) = match result {
            Ok(o) if o.passed => ("PASS", o.detail.clone()),
            Ok(o) => ("FAIL", o.detail.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {name}: {status} [{secs:.1}s] {detail}");
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

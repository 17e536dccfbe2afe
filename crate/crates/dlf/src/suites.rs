//! Verification suites run by `dlf verify` and the acceptance tests.

use dlf_core::autodiff::Graph;
use dlf_core::coupling::CondSpec;
use dlf_core::data::{toy2d, Toy2d};
use dlf_core::layers::{DynLin, DynLinConfig, Inv1x1, Variant};
use dlf_core::model::{one_hot, Model, ModelConfig};
use dlf_core::params::ParamStore;
use dlf_core::rng::{normal, seeded, uniform};
use dlf_core::verify::{
    check_gradients, check_model_logdet, check_roundtrip, log_abs_det, numeric_jacobian, off_pattern_max,
    partition_triangular, randomize_params, GradientCheckConfig, JACOBIAN_STEP,
};
use dlf_core::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    /// Worst observed error.
    pub worst: f64,
    pub tolerance: f64,
    /// Description of the first failing case, with its seed.
    pub failure: Option<String>,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            trials: 0,
            worst: 0.0,
            tolerance,
            failure: None,
        }
    }

    fn record(&mut self, err: f64, case: impl FnOnce() -> String) {
        self.trials += 1;
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= self.tolerance) && self.failure.is_none() {
            self.failure = Some(format!("{}: error {err:e}", case()));
        }
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.trials > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: worst {:.3e} (tol {:.0e}) over {} trials{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.trials,
            self.failure.as_ref().map(|f| format!("; {f}")).unwrap_or_default()
        )
    }
}

/// Shape of the inputs a round-trip configuration exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Flat(usize),
    Image8x8x2,
}

pub const LAYOUTS: [Layout; 3] = [Layout::Flat(4), Layout::Flat(8), Layout::Image8x8x2];
pub const CLASSES: usize = 10;

fn model_config(layout: Layout, k: usize, variant: Variant, conditional: bool, seed: u64) -> ModelConfig {
    let base = match layout {
        Layout::Flat(d) => ModelConfig::flat(d, k),
        Layout::Image8x8x2 => ModelConfig::image(8, 8, 2, 2, k),
    };
    base.with_steps(2)
        .with_hidden(8)
        .with_variant(variant)
        .with_classes(conditional.then_some(CLASSES))
        .with_seed(seed)
}

fn batch(layout: Layout, n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed, 77);
    match layout {
        Layout::Flat(d) => Tensor::from_fn(&[n, d], |_| normal(&mut rng)),
        Layout::Image8x8x2 => Tensor::from_fn(&[n, 8, 8, 2], |_| uniform(&mut rng)),
    }
}

fn labels(n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed, 78);
    let l: Vec<usize> = (0..n).map(|_| (uniform(&mut rng) * CLASSES as f64) as usize).collect();
    one_hot(&l, CLASSES).expect("labels in range")
}

/// Forward then inverse through single layers: a dynamic linear layer and
/// a 1×1 convolution, on flat and image-shaped inputs.
fn layer_roundtrip(layout: Layout, k: usize, variant: Variant, conditional: bool, seed: u64) -> Result<f64> {
    let (shape, kernel) = match layout {
        Layout::Flat(d) => ([3, 1, 1, d], 1),
        Layout::Image8x8x2 => ([3, 4, 4, 8], 3),
    };
    let c = shape[3];
    let mut rng = seeded(seed, 0);
    let mut store = ParamStore::new();
    let mut cfg = DynLinConfig::new(c, k);
    cfg.kernel = kernel;
    cfg.hidden = 8;
    cfg.variant = variant;
    cfg.cond = conditional.then_some(CondSpec::Classes(CLASSES));
    let dl = DynLin::new(&mut store, "dl", cfg, &mut rng)?;
    let inv = Inv1x1::new(&mut store, "inv", c, &mut rng);
    randomize_params(&mut store, 0.3, &mut seeded(seed, 1));
    let mut g = Graph::no_grad();
    let b = store.bind(&mut g);
    let mut xr = seeded(seed, 2);
    let x = Tensor::from_fn(&shape, |_| normal(&mut xr));
    let xv = g.constant(x.clone());
    let h = conditional.then(|| g.constant(labels(3, seed)));
    let (y, _) = dl.forward(&mut g, &b, xv, h)?;
    let back = dl.inverse(&mut g, &b, y, h)?;
    let (y2, _) = inv.forward(&mut g, &b, xv)?;
    let back2 = inv.inverse(&mut g, &b, y2)?;
    Ok(g.value(back).max_abs_diff(&x).max(g.value(back2).max_abs_diff(&x)))
}

/// Round trips over K × variant × conditioning × layout, `seeds` each.
pub fn roundtrip_matrix(seeds: u64, base_seed: u64) -> Result<(Check, Check)> {
    let mut layers = Check::new("round trip (layers)", 1e-8);
    let mut models = Check::new("round trip (models)", 1e-6);
    for k in [1, 2, 4] {
        for variant in [Variant::Standard, Variant::Inverse] {
            for conditional in [false, true] {
                for layout in LAYOUTS {
                    for s in base_seed..base_seed + seeds {
                        let case = || format!("K={k} {variant:?} conditional={conditional} {layout:?} seed={s}");
                        layers.record(layer_roundtrip(layout, k, variant, conditional, s)?, case);
                        let mut model = Model::new(model_config(layout, k, variant, conditional, s))?;
                        randomize_params(model.params_mut(), 0.2, &mut seeded(s, 3));
                        let x = batch(layout, 4, s);
                        let h = conditional.then(|| labels(4, s));
                        models.record(check_roundtrip(&model, &x, h.as_ref())?, case);
                    }
                }
            }
        }
    }
    Ok((layers, models))
}

/// Numeric-Jacobian log-determinants of flat models with `D ≤ 12`, and the
/// partition-triangular structure of standard dynamic linear layers.
pub fn logdet_oracle(seeds: u64, base_seed: u64) -> Result<(Check, Check)> {
    let mut logdet = Check::new("log-determinant oracle", 1e-4);
    let mut structure = Check::new("triangular Jacobian", 1e-6);
    let configs = [(4, 2), (6, 3), (8, 2), (8, 4), (12, 3), (12, 4), (4, 1)];
    for (d, k) in configs {
        for variant in [Variant::Standard, Variant::Inverse] {
            for s in base_seed..base_seed + seeds {
                let case = || format!("D={d} K={k} {variant:?} seed={s}");
                let mut model = Model::new(ModelConfig::flat(d, k).with_steps(4).with_hidden(8).with_variant(variant).with_seed(s))?;
                randomize_params(model.params_mut(), 0.2, &mut seeded(s, 4));
                let x = batch(Layout::Flat(d), 1, s);
                logdet.record(check_model_logdet(&model, &x, None)?.discrepancy, case);

                if variant == Variant::Standard {
                    let mut store = ParamStore::new();
                    let mut cfg = DynLinConfig::new(d, k);
                    cfg.kernel = 1;
                    cfg.hidden = 8;
                    let dl = DynLin::new(&mut store, "dl", cfg, &mut seeded(s, 5))?;
                    randomize_params(&mut store, 0.4, &mut seeded(s, 6));
                    let forward = |p: &[f64]| -> dlf_core::Result<(Vec<f64>, f64)> {
                        let mut g = Graph::no_grad();
                        let b = store.bind(&mut g);
                        let xv = g.constant(Tensor::new(&[1, 1, 1, d], p.to_vec())?);
                        let (y, ld) = dl.forward(&mut g, &b, xv, None)?;
                        Ok((g.value(y).data().to_vec(), g.value(ld).item()))
                    };
                    let j = numeric_jacobian(|p| Ok(forward(p)?.0), x.data(), JACOBIAN_STEP)?;
                    structure.record(off_pattern_max(&j, partition_triangular(d / k)), case);
                    logdet.record((log_abs_det(&j)? - forward(x.data())?.1).abs(), case);
                }
            }
        }
    }
    Ok((logdet, structure))
}

/// Finite-difference gradient checks on an unconditional two-moons model,
/// a conditional flat model and a small image model, each with randomized
/// parameters.
pub fn gradient_oracle(coordinates: usize, seed: u64) -> Result<Check> {
    let mut check = Check::new("gradient oracle", 1e-4);
    let moons = toy2d(Toy2d::TwoMoons, 64, seed)?.data;
    let cases: Vec<(&str, ModelConfig, Tensor, Option<Tensor>)> = vec![
        (
            "two_moons flat K=2",
            ModelConfig::flat(2, 2).with_steps(3).with_hidden(8).with_seed(seed),
            moons.x.rows(0, 32),
            None,
        ),
        (
            "conditional flat K=3",
            ModelConfig::flat(6, 3).with_steps(2).with_hidden(6).with_classes(Some(CLASSES)).with_seed(seed),
            batch(Layout::Flat(6), 16, seed),
            Some(labels(16, seed)),
        ),
        (
            "image 4x4x1 L=2 actnorm",
            ModelConfig::image(4, 4, 1, 2, 2).with_steps(1).with_hidden(4).with_actnorm(true).with_seed(seed),
            Tensor::from_fn(&[8, 4, 4, 1], {
                let mut r = seeded(seed, 8);
                move |_| uniform(&mut r)
            }),
            None,
        ),
    ];
    for (name, cfg, x, h) in cases {
        let mut model = Model::new(cfg)?;
        model.mark_initialized();
        randomize_params(model.params_mut(), 0.3, &mut seeded(seed, 9));
        let grads = model.loss_and_grads(&x, h.as_ref())?.grads;
        let report = check_gradients(
            &model,
            &x,
            h.as_ref(),
            &grads,
            GradientCheckConfig {
                coordinates,
                seed,
                ..GradientCheckConfig::default()
            },
        )?;
        check.trials += report.checked;
        check.worst = check.worst.max(report.worst_relative);
        if !report.passed() && check.failure.is_none() {
            check.failure = Some(match report.failures.first() {
                Some(f) => format!(
                    "{name} seed={seed}: {}[{}] analytic {:e} vs numeric {:e}",
                    f.param, f.index, f.analytic, f.numeric
                ),
                None => format!(
                    "{name} seed={seed}: covered {}/{} tensors",
                    report.tensors_covered, report.tensors_total
                ),
            });
        }
    }
    Ok(check)
}

/// Closed-form cases the oracle must reproduce before it is trusted.
pub fn oracle_self_test() -> Result<Check> {
    let mut check = Check::new("oracle self-test", 1e-6);
    let x = [0.3, -1.2, 2.0];
    let j = numeric_jacobian(|p| Ok(p.iter().map(|v| 2.0 * v).collect()), &x, JACOBIAN_STEP)?;
    check.record((log_abs_det(&j)? - 3.0 * std::f64::consts::LN_2).abs(), || "f(x) = 2x".into());
    let perm = [3usize, 1, 0, 2];
    let j = numeric_jacobian(|p| Ok(perm.iter().map(|&i| p[i]).collect()), &[1.0, 2.0, 3.0, 4.0], JACOBIAN_STEP)?;
    check.record(log_abs_det(&j)?.abs(), || "permutation".into());
    check.record(off_pattern_max(&j, |i, c| perm[i] == c), || "permutation pattern".into());
    Ok(check)
}

/// Every suite at the given depth.
pub fn run_all(seeds: u64, seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![oracle_self_test()?];
    let (a, b) = roundtrip_matrix(seeds, seed)?;
    out.extend([a, b]);
    let (a, b) = logdet_oracle(seeds, seed)?;
    out.extend([a, b]);
    out.push(gradient_oracle(200, seed)?);
    Ok(out)
}

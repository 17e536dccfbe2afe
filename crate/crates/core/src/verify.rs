//! Brute-force oracles for the analytic parts of the library.
//!
//! Nothing here uses the layers' log-determinant code or the LU routines in
//! [`crate::linalg`]: Jacobians come from finite differences of plain
//! forward maps and determinants from a separate elimination.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::Model;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{normal, seeded, FlowRng};
use crate::tensor::Tensor;

pub const JACOBIAN_STEP: f64 = 1e-5;

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j` as a `[D_out, D_in]`
/// tensor.
pub fn numeric_jacobian(mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>, x: &[f64], step: f64) -> Result<Tensor> {
    let d_in = x.len();
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(d_in);
    let mut d_out = None;
    for j in 0..d_in {
        probe[j] = x[j] + step;
        let plus = f(&probe)?;
        probe[j] = x[j] - step;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != minus.len() || d_out.is_some_and(|d| d != plus.len()) {
            return Err(Error::Oracle("map changed output length".into()));
        }
        d_out = Some(plus.len());
        let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * step)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Oracle(format!("non-finite output probing coordinate {j}")));
        }
        columns.push(col);
    }
    let d_out = d_out.unwrap_or(0);
    Tensor::new(&[d_out, d_in], (0..d_out * d_in).map(|k| columns[k % d_in][k / d_in]).collect())
        .map_err(|_| Error::Oracle("empty Jacobian".into()))
}

/// `log|det m|` by Gaussian elimination with full pivoting. Returns
/// `-inf` for a singular matrix.
pub fn log_abs_det(m: &Tensor) -> Result<f64> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::Oracle(format!("determinant of non-square {:?}", m.shape())));
    }
    let n = m.shape()[0];
    let mut a = m.data().to_vec();
    let mut total = 0.0;
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for r in k..n {
            for c in k..n {
                if a[r * n + c].abs() > best {
                    best = a[r * n + c].abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        if best == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        for c in 0..n {
            a.swap(k * n + c, pr * n + c);
        }
        for r in 0..n {
            a.swap(r * n + k, r * n + pc);
        }
        let pivot = a[k * n + k];
        total += math::ln(pivot.abs());
        for r in k + 1..n {
            let f = a[r * n + k] / pivot;
            for c in k..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub dim: usize,
    pub numeric: f64,
    pub analytic: f64,
    /// `|numeric − analytic|`.
    pub discrepancy: f64,
    /// Largest Jacobian entry outside the expected sparsity pattern, when a
    /// pattern was checked.
    pub structure_error: Option<f64>,
}

impl JacobianReport {
    pub fn new(numeric: f64, analytic: f64, dim: usize) -> Self {
        JacobianReport {
            dim,
            numeric,
            analytic,
            discrepancy: (numeric - analytic).abs(),
            structure_error: None,
        }
    }

    pub fn passes(&self, tol: f64, structure_tol: f64) -> bool {
        self.discrepancy <= tol && self.structure_error.is_none_or(|e| e <= structure_tol)
    }
}

/// Largest `|J[i][j]|` where `allowed(i, j)` is false.
pub fn off_pattern_max(j: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> f64 {
    let cols = j.shape()[1];
    j.data()
        .iter()
        .enumerate()
        .filter(|(k, _)| !allowed(k / cols, k % cols))
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

/// Lower block-triangular pattern in partition order: output `i` may
/// depend on input `j` only if `j` is in an earlier partition or `i == j`.
pub fn partition_triangular(width: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| i == j || j / width < i / width
}

/// Compares a flat model's log-determinant at the single sample `x`
/// (`[1, D]`) with the numeric Jacobian of its encoder.
pub fn check_model_logdet(model: &Model, x: &Tensor, cond: Option<&Tensor>) -> Result<JacobianReport> {
    let d = x.len();
    let shape = x.shape().to_vec();
    let jac = numeric_jacobian(
        |p| Ok(model.encode(&Tensor::new(&shape, p.to_vec())?, cond)?.into_data()),
        x.data(),
        JACOBIAN_STEP,
    )?;
    let numeric = log_abs_det(&jac)?;
    let analytic = model.log_det(x, cond)?[0];
    Ok(JacobianReport::new(numeric, analytic, d))
}

/// Perturbs every parameter by `scale · N(0, 1)`. Weights of 1×1
/// convolutions keep their value as a base so they stay well conditioned.
pub fn randomize_params(store: &mut ParamStore, scale: f64, rng: &mut FlowRng) {
    for (_, p) in store.iter_mut() {
        let k = match p.kind {
            ParamKind::Inv1x1Weight => 0.5 * scale,
            ParamKind::Other => scale,
        };
        p.value.data_mut().iter_mut().for_each(|v| *v += k * normal(rng));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub checked: usize,
    /// Parameter tensors with at least one checked coordinate.
    pub tensors_covered: usize,
    pub tensors_total: usize,
    /// Coordinates discarded because the loss has a kink near them.
    pub kinks_skipped: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among coordinates above the
    /// absolute floor.
    pub worst_relative: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.tensors_covered == self.tensors_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckConfig {
    pub coordinates: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        GradientCheckConfig {
            coordinates: 200,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

/// Finite-difference check of `analytic` (one tensor per parameter, in
/// store order) against the model's training objective on `x`.
///
/// At least one coordinate is drawn from each parameter tensor; the rest
/// are uniform over all scalars. A coordinate whose one-sided slopes
/// disagree without shrinking as the step halves sits on a ReLU kink and
/// is replaced by a fresh draw.
pub fn check_gradients(
    model: &Model,
    x: &Tensor,
    cond: Option<&Tensor>,
    analytic: &[Tensor],
    cfg: GradientCheckConfig,
) -> Result<GradientReport> {
    let store = model.params();
    if analytic.len() != store.len() {
        return Err(Error::Oracle(format!("{} gradients for {} parameters", analytic.len(), store.len())));
    }
    let dim = model.dim() as f64;
    let objective = |m: &Model| -> Result<f64> {
        let ll = m.log_likelihood(x, cond)?;
        Ok(ll.nll.iter().sum::<f64>() / ll.nll.len() as f64 / dim)
    };
    let base = objective(model)?;
    let mut probe = model.clone();
    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seeded(cfg.seed, 0x4752_4144);
    let mut eval_at = |id: ParamId, index: usize, delta: f64| -> Result<f64> {
        let original = model.params().get(id).data()[index];
        probe.params_mut().get_mut(id).data_mut()[index] = original + delta;
        let v = objective(&probe);
        probe.params_mut().get_mut(id).data_mut()[index] = original;
        v
    };

    let mut report = GradientReport {
        checked: 0,
        tensors_covered: 0,
        tensors_total: sizes.len(),
        kinks_skipped: 0,
        worst_relative: 0.0,
        failures: Vec::new(),
    };
    let mut covered = vec![false; sizes.len()];
    let mut tensor_queue: Vec<usize> = (0..sizes.len()).collect();
    let max_attempts = 20 * (cfg.coordinates + sizes.len());
    let mut attempts = 0;
    while report.checked < cfg.coordinates.max(sizes.len()) || !tensor_queue.is_empty() {
        attempts += 1;
        if attempts > max_attempts {
            break;
        }
        let (t, index) = if let Some(&t) = tensor_queue.first() {
            (t, rng.random_range(0..sizes[t]))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut t = 0;
            while flat >= sizes[t] {
                flat -= sizes[t];
                t += 1;
            }
            (t, flat)
        };
        let id = ParamId(t);
        let h = cfg.step;
        let plus = eval_at(id, index, h)?;
        let minus = eval_at(id, index, -h)?;
        let central = (plus - minus) / (2.0 * h);
        let tol = |a: f64, b: f64| cfg.abs_floor.max(cfg.rel_tol * a.abs().max(b.abs()));
        let spread = (plus - base) / h - (base - minus) / h;
        if spread.abs() > tol(central, central) {
            let half_plus = eval_at(id, index, h / 2.0)?;
            let half_minus = eval_at(id, index, -h / 2.0)?;
            let half_spread = (half_plus - base) / (h / 2.0) - (base - half_minus) / (h / 2.0);
            let ratio = spread / half_spread;
            if !(1.5..=2.5).contains(&ratio) {
                report.kinks_skipped += 1;
                continue;
            }
        }
        let a = analytic[t].data()[index];
        let diff = (a - central).abs();
        if a.abs().max(central.abs()) > cfg.abs_floor {
            report.worst_relative = report.worst_relative.max(diff / a.abs().max(central.abs()));
        }
        if diff > tol(a, central) {
            report.failures.push(GradMismatch {
                param: store.name(id).into(),
                index,
                analytic: a,
                numeric: central,
            });
        }
        report.checked += 1;
        if !covered[t] {
            covered[t] = true;
            tensor_queue.retain(|&q| q != t);
        }
    }
    report.tensors_covered = covered.iter().filter(|&&c| c).count();
    Ok(report)
}

/// `max |decode(encode(x)) − x|`.
pub fn check_roundtrip(model: &Model, x: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
    let z = model.encode(x, cond)?;
    let back = model.decode(&z, cond)?;
    Ok(back.max_abs_diff(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn linear_map_jacobian() {
        let j = numeric_jacobian(|p| Ok(p.iter().map(|v| 2.0 * v).collect()), &[0.3, -1.0, 2.0], 1e-5).unwrap();
        let eye2 = Tensor::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 2.0 } else { 0.0 });
        assert!(j.max_abs_diff(&eye2) < 1e-6);
        assert!((log_abs_det(&j).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn permutation_jacobian() {
        let perm = [2usize, 0, 3, 1];
        let j = numeric_jacobian(|p| Ok(perm.iter().map(|&i| p[i]).collect()), &[1.0, 2.0, 3.0, 4.0], 1e-5).unwrap();
        assert!(log_abs_det(&j).unwrap().abs() < 1e-6);
        assert!(off_pattern_max(&j, |i, c| perm[i] == c) < 1e-9);
    }

    #[test]
    fn determinant_of_known_matrix() {
        let m = Tensor::new(&[2, 2], vec![3.0, 1.0, 4.0, 2.0]).unwrap();
        assert!((log_abs_det(&m).unwrap() - 2f64.ln()).abs() < 1e-14);
        let singular = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(log_abs_det(&singular).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn non_finite_output_is_oracle_error() {
        let r = numeric_jacobian(|p| Ok(vec![1.0 / (p[0] - 0.5)]), &[0.5], 1e-5);
        assert!(r.is_ok());
        let r = numeric_jacobian(|_| Ok(vec![f64::NAN]), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut model = Model::new(ModelConfig::flat(4, 2).with_steps(2).with_hidden(4)).unwrap();
        randomize_params(model.params_mut(), 0.3, &mut seeded(1, 0));
        let x = Tensor::from_fn(&[8, 4], |i| (i as f64 * 0.37).sin());
        let mut grads = model.loss_and_grads(&x, None).unwrap().grads;
        let cfg = GradientCheckConfig {
            coordinates: 60,
            ..GradientCheckConfig::default()
        };
        assert!(check_gradients(&model, &x, None, &grads, cfg).unwrap().passed());
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.01);
        }
        let bad = check_gradients(&model, &x, None, &grads, cfg).unwrap();
        assert!(!bad.passed());
    }
}

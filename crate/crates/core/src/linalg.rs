//! Small dense linear algebra for the c×c weights of 1×1 convolutions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::normal;
use crate::tensor::Tensor;

/// Determinants below this magnitude are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// LU factorization with partial pivoting, `P·A = L·U`, stored packed.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let s = a.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::contract("lu", format!("expected a square matrix, got {s:?}")));
        }
        let n = s[0];
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i * self.n + i])
    }

    /// `log|det A|`; `-inf` for an exactly singular matrix.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| math::ln(self.lu[i * self.n + i].abs())).sum()
    }

    pub fn is_singular(&self) -> bool {
        !(self.det().abs() >= SINGULAR_DET)
    }

    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&y);
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        Tensor::new(&[n, n], inv).expect("square")
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    assert_eq!(k, b.shape()[0], "inner dimensions differ");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b.data()[p * m + j];
            }
        }
    }
    Tensor::new(&[n, m], out).expect("shape")
}

/// A uniformly distributed orthogonal matrix: Householder QR of a Gaussian
/// matrix with the signs of `diag(R)` folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut a: Vec<f64> = (0..n * n).map(|_| normal(rng)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut diag_sign = vec![1.0; n];
    for k in 0..n {
        let norm = math::sqrt((k..n).map(|r| a[r * n + k] * a[r * n + k]).sum());
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (0..n).map(|r| if r < k { 0.0 } else { a[r * n + k] }).collect();
        v[k] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // A ← H A, Q ← Q H with H = I - 2 v vᵀ / (vᵀ v).
            for c in 0..n {
                let d: f64 = (k..n).map(|r| v[r] * a[r * n + c]).sum::<f64>() * 2.0 / vnorm2;
                for r in k..n {
                    a[r * n + c] -= d * v[r];
                }
            }
            for r in 0..n {
                let d: f64 = (k..n).map(|c| q[r * n + c] * v[c]).sum::<f64>() * 2.0 / vnorm2;
                for c in k..n {
                    q[r * n + c] -= d * v[c];
                }
            }
        }
        diag_sign[k] = if a[k * n + k] < 0.0 { -1.0 } else { 1.0 };
    }
    for r in 0..n {
        for c in 0..n {
            q[r * n + c] *= diag_sign[c];
        }
    }
    Tensor::new(&[n, n], q).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn det_of_diagonal_and_permuted() {
        let a = Tensor::new(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let lu = Lu::factor(&a).unwrap();
        assert!((lu.det() - 8.0).abs() < 1e-12);
        assert!((lu.log_abs_det() - 8f64.ln()).abs() < 1e-12);
        let p = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((Lu::factor(&p).unwrap().det() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_and_inverse() {
        let a = Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let mut b = [2.0, 4.0];
        Lu::factor(&a).unwrap().solve_in_place(&mut b);
        assert_eq!(b, [1.0, 2.0]);

        let mut rng = seeded(3, 0);
        let m = Tensor::from_fn(&[5, 5], |_| normal(&mut rng));
        let inv = Lu::factor(&m).unwrap().inverse();
        let eye = matmul(&m, &inv);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye.data()[i * 5 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_detection() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(Lu::factor(&a).unwrap().is_singular());
    }

    #[test]
    fn orthogonal_has_unit_determinant() {
        let mut rng = seeded(11, 0);
        for n in [1, 2, 3, 8] {
            let q = random_orthogonal(n, &mut rng);
            let qtq = matmul(&q.transpose(), &q);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq.data()[i * n + j] - want).abs() < 1e-12);
                }
            }
            assert!(Lu::factor(&q).unwrap().log_abs_det().abs() < 1e-12);
        }
    }
}

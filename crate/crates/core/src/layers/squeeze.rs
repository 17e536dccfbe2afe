//! Structural layers: space-to-depth squeeze and the half-channel split.

use alloc::format;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::LN_2PI;

/// `[N, H, W, C]` → `[N, H/2, W/2, 4C]`. Log-determinant is zero.
pub fn squeeze(g: &mut Graph, x: Var) -> Result<Var> {
    g.squeeze2x2(x)
}

pub fn unsqueeze(g: &mut Graph, x: Var) -> Result<Var> {
    g.unsqueeze2x2(x)
}

/// Returns `(continuing half, factored-out half)`.
pub fn split_out(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let c = *g.shape(x).last().unwrap();
    if c % 2 != 0 {
        return Err(Error::Config(format!("cannot split {c} channels in half")));
    }
    let parts = g.channel_split(x, &[c / 2, c / 2])?;
    Ok((parts[0], parts[1]))
}

pub fn merge(g: &mut Graph, keep: Var, factored: Var) -> Result<Var> {
    g.concat(&[keep, factored])
}

/// Per-sample standard-normal log-density, shape `[N]`.
pub fn prior_log_density(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g.value(z).sample_len();
    let sq = g.mul(z, z)?;
    let total = g.sum_per_sample(sq)?;
    let half = g.scale(total, -0.5);
    let offset = g.scalar(-0.5 * d as f64 * LN_2PI);
    g.add(half, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn split_halves_and_merge() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 8], |i| i as f64));
        let (a, b) = split_out(&mut g, x).unwrap();
        assert_eq!(g.shape(a), &[2, 2, 2, 4]);
        assert_eq!(g.shape(b), &[2, 2, 2, 4]);
        let m = merge(&mut g, a, b).unwrap();
        assert_eq!(g.value(m), g.value(x));
        let odd = g.constant(Tensor::zeros(&[1, 1, 1, 3]));
        assert!(matches!(split_out(&mut g, odd), Err(Error::Config(_))));
    }

    #[test]
    fn prior_at_mode() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 5]));
        let lp = prior_log_density(&mut g, z).unwrap();
        assert!((g.value(lp).item() + 2.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn squeeze_maps_blocks_to_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
        let s = squeeze(&mut g, x).unwrap();
        let v = g.value(s).data();
        // block (0,0) and block (1,1)
        assert_eq!(&v[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&v[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }
}

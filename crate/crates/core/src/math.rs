//! Scalar math that `core` does not provide.

pub const LN_2: f64 = core::f64::consts::LN_2;
/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// Log-density of a standard normal evaluated at `x`.
#[inline]
pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * (x * x + LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * core::f64::consts::PI).ln()).abs() < 1e-15);
    }
}

//! Normal-distribution helpers with stable tails.

use libm::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this linear predictor the ratio `φ/Φ` switches to the continued fraction.
const MILLS_SWITCH: f64 = 8.0;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `(1 - Φ(t)) / φ(t)` for `t > 0` by the Laplace continued fraction.
fn upper_mills(t: f64) -> f64 {
    // Evaluate t + 1/(t + 2/(t + 3/(t + ...))) from the tail up.
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// `φ(x)/Φ(x)`, finite for every finite `x`.
pub fn inv_mills(x: f64) -> f64 {
    if x < -MILLS_SWITCH {
        1.0 / upper_mills(-x)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

/// `log Φ(x)`, finite for every finite `x`.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < -MILLS_SWITCH {
        -0.5 * x * x - LN_SQRT_2PI + upper_mills(-x).ln()
    } else {
        norm_cdf(x).ln()
    }
}

/// Derivative of `x ↦ φ(x)/Φ(x)`.
pub fn inv_mills_derivative(x: f64) -> f64 {
    let m = inv_mills(x);
    -m * (x + m)
}

/// Regularized incomplete beta function, clamped to the support.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        statrs::function::beta::beta_reg(a, b, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cdf_reference_points() {
        assert_relative_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(norm_cdf(1.0), 0.841_344_746_068_542_9, epsilon = 1e-14);
        assert_relative_eq!(norm_cdf(-1.96), 0.024_997_895_148_220_43, epsilon = 1e-14);
    }

    #[test]
    fn mills_ratio_is_continuous_at_switch() {
        let left = 1.0 / upper_mills(MILLS_SWITCH);
        let right = norm_pdf(-MILLS_SWITCH) / norm_cdf(-MILLS_SWITCH);
        assert_relative_eq!(left, right, max_relative = 1e-10);
        assert_relative_eq!(
            log_norm_cdf(-MILLS_SWITCH - 1e-9),
            norm_cdf(-MILLS_SWITCH - 1e-9).ln(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn extreme_predictors_stay_finite() {
        for &x in &[-40.0, -200.0, -1e4, 40.0, 1e4] {
            assert!(inv_mills(x).is_finite());
            assert!(log_norm_cdf(x).is_finite());
            assert!(inv_mills_derivative(x).is_finite());
        }
        // φ(x)/Φ(x) ≈ -x for very negative x.
        assert_relative_eq!(inv_mills(-1e4), 1e4, max_relative = 1e-6);
    }

    #[test]
    fn mills_derivative_matches_central_difference() {
        for &x in &[-12.0, -3.0, 0.0, 2.5] {
            let h = 1e-5;
            let fd = (inv_mills(x + h) - inv_mills(x - h)) / (2.0 * h);
            assert_relative_eq!(inv_mills_derivative(x), fd, max_relative = 1e-6);
        }
    }
}

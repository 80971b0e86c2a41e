//! Scalar Gaussian helpers with stable log-scale tails.

use statrs::distribution::{ContinuousCDF, Normal};

pub const LN_2PI: f64 = 1.8378770664093453;

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Log-density of N(0, 1) at `z`.
#[inline]
pub fn log_std_pdf(z: f64) -> f64 {
    -0.5 * (LN_2PI + z * z)
}

/// Log-CDF of N(0, 1), switching to the Mills-ratio expansion in the far
/// left tail where the CDF itself underflows.
pub fn log_std_cdf(z: f64) -> f64 {
    if z > -34.0 {
        standard().cdf(z).ln()
    } else {
        // ln Phi(z) = -z^2/2 - ln(-z sqrt(2 pi)) + ln(series in 1/z^2)
        let inv2 = 1.0 / (z * z);
        let series =
            1.0 - inv2 + 3.0 * inv2 * inv2 - 15.0 * inv2 * inv2 * inv2
                + 105.0 * inv2 * inv2 * inv2 * inv2;
        -0.5 * z * z - (-z).ln() - 0.5 * LN_2PI + series.ln()
    }
}

/// Quantile of N(0, 1); clamps the probability into the open unit interval.
#[inline]
pub fn std_quantile(p: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_cdf_matches_direct_evaluation() {
        for z in [-5.0, -1.96, -0.5, 0.0, 1.3, 4.0] {
            assert_abs_diff_eq!(log_std_cdf(z), standard().cdf(z).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_cdf_tail_is_finite_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let z = -200.0 + i as f64;
            let v = log_std_cdf(z);
            assert!(v.is_finite());
            assert!(v > prev, "not monotone at z = {z}");
            prev = v;
        }
    }

    #[test]
    fn branches_agree_at_the_switchover() {
        let z = -34.0f64;
        let direct = standard().cdf(z).ln();
        let inv2 = 1.0 / (z * z);
        let series = 1.0 - inv2 + 3.0 * inv2 * inv2 - 15.0 * inv2 * inv2 * inv2
            + 105.0 * inv2 * inv2 * inv2 * inv2;
        let asymptotic = -0.5 * z * z - (-z).ln() - 0.5 * LN_2PI + series.ln();
        assert_abs_diff_eq!(direct, asymptotic, epsilon = 1e-8);
    }

    #[test]
    fn quantile_saturates_instead_of_returning_infinities() {
        assert!(std_quantile(0.0).is_finite());
        assert!(std_quantile(1.0).is_finite());
        assert_abs_diff_eq!(std_quantile(0.5), 0.0, epsilon = 1e-12);
    }
}

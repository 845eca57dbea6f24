//! Small numerical helpers: compensated summation and distribution quantiles.

use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Neumaier-compensated sum.
pub fn sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(values: &[f64]) -> f64 {
    sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with the `n - 1` divisor. Returns `None` for fewer than two values.
pub fn sample_var(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    Some(sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Two-sided critical value `z_{alpha/2}` for a confidence level.
pub fn normal_critical(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}

/// Quantile of the chi-squared distribution with `df` degrees of freedom.
///
/// Inverts the regularized lower incomplete gamma function by safeguarded Newton steps.
pub fn chi_squared_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    assert!(df > 0.0, "degrees of freedom must be positive");
    let shape = df / 2.0;
    let cdf = |x: f64| gamma_lr(shape, x / 2.0);
    let log_pdf = |x: f64| (shape - 1.0) * (x / 2.0).ln() - x / 2.0 - ln_gamma(shape) - 2f64.ln();

    let mut lo = 0.0;
    let mut hi = df.max(1.0);
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = cdf(x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / log_pdf(x).exp();
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * x.max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_critical_95() {
        assert!((normal_critical(0.95) - 1.959963985).abs() < 1e-8);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
    }

    #[test]
    fn chi_squared_table_values() {
        // Reference values for 10 degrees of freedom.
        let table = [
            (0.05, 3.940_299_136_119_060_5),
            (0.5, 9.341_817_765_591_97),
            (0.95, 18.307_038_053_275_146),
            (0.99, 23.209_251_158_954_356),
        ];
        for (p, q) in table {
            assert!((chi_squared_quantile(p, 10.0) - q).abs() < 1e-10, "p={p}");
        }
        assert!((chi_squared_quantile(0.95, 1.0) - 3.841_458_820_694_124).abs() < 1e-10);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(sum(v), 1.0);
    }

    #[test]
    fn sample_var_basic() {
        assert_eq!(sample_var(&[1.0, 3.0]), Some(2.0));
        assert_eq!(sample_var(&[1.0]), None);
    }
}

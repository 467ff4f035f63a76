//! Special functions used by the Dirichlet and endmember-prior moments.
//!
//! Digamma and trigamma use upward recurrence to `x >= 6` followed by the
//! asymptotic series; log-gamma uses a Lanczos approximation (g = 7, n = 9).

use crate::error::{HelenError, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const ASYMPTOTIC_SHIFT: f64 = 6.0;

/// Natural logarithm of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(HelenError::Domain { name: "digamma", value: x });
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli tail: sum B_2k / (2k x^2k)
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

/// Trigamma function ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(HelenError::Domain { name: "trigamma", value: x });
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0
                                        - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + tail
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a + b).
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    for v in [a, b] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(HelenError::Domain { name: "log_beta", value: v });
        }
    }
    Ok(ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}

/// ln B(α) = Σ ln Γ(α_i) − ln Γ(Σ α_i).
pub fn log_multivariate_beta(alpha: &[f64]) -> Result<f64> {
    if alpha.len() < 2 {
        return Err(HelenError::invalid("multivariate beta needs at least two parameters"));
    }
    let mut sum = 0.0;
    let mut acc = 0.0;
    for &a in alpha {
        if !(a > 0.0) || !a.is_finite() {
            return Err(HelenError::Domain { name: "log_multivariate_beta", value: a });
        }
        sum += a;
        acc += ln_gamma(a);
    }
    Ok(acc - ln_gamma(sum))
}

/// Compensated (Neumaier) summation; the result does not depend on the
/// grouping of the input to within a few ulps.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    // Oracle: ψ(x) = -γ + Σ_{k≥0} [1/(k+1) - 1/(k+x)], with the tail beyond K
    // replaced by its Euler–Maclaurin estimate (x-1)/K - (x-1)/(2K²)-ish terms.
    fn digamma_series(x: f64) -> f64 {
        let k_max = 200_000usize;
        let mut s = -EULER_GAMMA;
        for k in 0..k_max {
            let k = k as f64;
            s += 1.0 / (k + 1.0) - 1.0 / (k + x);
        }
        // tail Σ_{k≥K} [1/(k+1) - 1/(k+x)] ≈ ln((K+x-0.5)/(K+0.5))
        let kf = k_max as f64;
        s + ((kf + x - 0.5) / (kf + 0.5)).ln()
    }

    #[test]
    fn digamma_known_values() {
        assert_relative_eq!(digamma(1.0).unwrap(), -EULER_GAMMA, max_relative = 1e-12);
        assert_relative_eq!(digamma(2.0).unwrap(), 1.0 - EULER_GAMMA, max_relative = 1e-12);
        let half = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert_relative_eq!(digamma(0.5).unwrap(), half, max_relative = 1e-12);
        assert_relative_eq!(digamma(0.5).unwrap(), -1.963_510_026_021_423_5, max_relative = 1e-12);
    }

    #[test]
    fn digamma_matches_series_oracle() {
        for &x in &[0.1, 0.7, 1.3, 3.5, 5.9, 6.1, 12.0, 40.0] {
            assert_relative_eq!(digamma(x).unwrap(), digamma_series(x), max_relative = 1e-9, epsilon = 1e-10);
        }
    }

    #[test]
    fn digamma_recurrence() {
        let mut x = 1e-3;
        while x < 1e6 {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert_relative_eq!(lhs, 1.0 / x, max_relative = 1e-12, epsilon = 1e-12);
            x *= 1.37;
        }
    }

    #[test]
    fn digamma_domain_error() {
        assert!(matches!(digamma(0.0), Err(HelenError::Domain { .. })));
        assert!(digamma(-1.0).is_err());
    }

    #[test]
    fn trigamma_known_values_and_recurrence() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert_relative_eq!(trigamma(1.0).unwrap(), pi2_6, max_relative = 1e-12);
        assert_relative_eq!(trigamma(0.5).unwrap(), 3.0 * pi2_6, max_relative = 1e-12);
        let mut x = 1e-3;
        while x < 1e5 {
            let lhs = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap();
            assert_relative_eq!(lhs, 1.0 / (x * x), max_relative = 1e-9);
            x *= 1.9;
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.0, 2.5, 7.0, 55.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(trigamma(x).unwrap(), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn ln_gamma_factorials() {
        let mut fact = 1.0_f64;
        for n in 1..25 {
            assert_relative_eq!(ln_gamma(n as f64 + 1.0), fact.ln() + (n as f64).ln(), max_relative = 1e-13, epsilon = 1e-14);
            fact *= n as f64;
        }
        assert_relative_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), max_relative = 1e-13);
    }

    #[test]
    fn log_beta_examples() {
        assert!(log_beta(1.0, 1.0).unwrap().abs() < 1e-14);
        assert_relative_eq!(log_beta(2.0, 2.0).unwrap(), (1.0_f64 / 6.0).ln(), max_relative = 1e-12);
        assert_relative_eq!(log_beta(0.5, 0.5).unwrap(), std::f64::consts::PI.ln(), max_relative = 1e-12);
        assert!(log_beta(0.0, 1.0).is_err());
    }

    #[test]
    fn log_multivariate_beta_examples() {
        assert!(log_multivariate_beta(&[1.0, 1.0]).unwrap().abs() < 1e-14);
        assert_relative_eq!(log_multivariate_beta(&[1.0, 1.0, 1.0]).unwrap(), -std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(log_multivariate_beta(&[2.0, 3.0]).unwrap(), (1.0_f64 / 12.0).ln(), max_relative = 1e-12);
        assert!(log_multivariate_beta(&[1.0]).is_err());
        assert!(log_multivariate_beta(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn compensated_sum_is_order_insensitive() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1009) as f64 * 1e-3 + 1e8 * ((i % 2) as f64)).collect();
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(compensated_sum(xs.iter().copied()), compensated_sum(rev.iter().copied()));
    }

    proptest::proptest! {
        #[test]
        fn multivariate_beta_reduces_to_log_beta(a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
            let lhs = log_multivariate_beta(&[a, b]).unwrap();
            let rhs = log_beta(a, b).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}

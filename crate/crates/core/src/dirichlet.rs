//! Moments and entropy of the Dirichlet abundance posterior `Dir(α)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{HelenError, Result};
use crate::special::{digamma_unchecked, ln_gamma, trigamma_unchecked};

/// Projection bounds for Dirichlet parameters during optimization.
pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams(DVector<f64>);

impl DirichletParams {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(HelenError::invalid("Dirichlet needs N >= 2"));
        }
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(HelenError::invalid("Dirichlet parameters must be positive and finite"));
        }
        Ok(Self(alpha))
    }

    pub fn from_slice(alpha: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(alpha))
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// E[s] = α / 1ᵀα.
pub fn mean(p: &DirichletParams) -> DVector<f64> {
    let a = p.alpha();
    a / a.sum()
}

/// E[s sᵀ] = (Diag(α) + ααᵀ) / ((1 + 1ᵀα) 1ᵀα).
pub fn correlation(p: &DirichletParams) -> DMatrix<f64> {
    correlation_of(p.alpha().as_slice())
}

pub(crate) fn correlation_of(alpha: &[f64]) -> DMatrix<f64> {
    let n = alpha.len();
    let a0: f64 = alpha.iter().sum();
    let den = a0 * (a0 + 1.0);
    DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { alpha[i] } else { 0.0 };
        (diag + alpha[i] * alpha[j]) / den
    })
}

/// log B(α) − (α − 1)ᵀ(ψ(α) − ψ(1ᵀα)), the differential entropy of `Dir(α)`.
pub fn entropy_term(p: &DirichletParams) -> f64 {
    entropy_of(p.alpha().as_slice())
}

pub(crate) fn entropy_of(alpha: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma_unchecked(a0);
    let mut log_b = -ln_gamma(a0);
    let mut inner = 0.0;
    for &a in alpha {
        log_b += ln_gamma(a);
        inner += (a - 1.0) * (digamma_unchecked(a) - psi0);
    }
    log_b - inner
}

/// ∂H/∂α_j = −(α_j − 1) ψ'(α_j) + (1ᵀα − N) ψ'(1ᵀα).
pub(crate) fn entropy_grad(alpha: &[f64], out: &mut [f64]) {
    let a0: f64 = alpha.iter().sum();
    let shared = (a0 - alpha.len() as f64) * trigamma_unchecked(a0);
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = -(a - 1.0) * trigamma_unchecked(a) + shared;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dir(a: &[f64]) -> DirichletParams {
        DirichletParams::from_slice(a).unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_relative_eq!(mean(&dir(&[1.0, 1.0, 1.0])).as_slice(), &[1.0 / 3.0; 3][..], epsilon = 1e-15);
        assert_relative_eq!(mean(&dir(&[2.0, 1.0, 1.0])).as_slice(), &[0.5, 0.25, 0.25][..], epsilon = 1e-15);
        assert_relative_eq!(mean(&dir(&[0.3, 0.7])).as_slice(), &[0.3, 0.7][..], epsilon = 1e-15);
    }

    #[test]
    fn correlation_examples() {
        let c = correlation(&dir(&[1.0, 1.0, 1.0]));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 6.0 } else { 1.0 / 12.0 };
                assert_relative_eq!(c[(i, j)], want, epsilon = 1e-15);
            }
        }
        // E[s_i^2] = 2 / (N (N + 1)) under the uniform simplex distribution
        assert_relative_eq!(c[(0, 0)], 2.0 / 12.0, epsilon = 1e-15);

        let c = correlation(&dir(&[2.0, 3.0]));
        let want = DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.4]);
        assert_relative_eq!(c, want, epsilon = 1e-15);

        let c = correlation(&dir(&[1e9, 1e9]));
        assert_relative_eq!(c, DMatrix::from_element(2, 2, 0.25), epsilon = 1e-9);
    }

    #[test]
    fn entropy_examples() {
        assert!(entropy_term(&dir(&[1.0, 1.0])).abs() < 1e-14);
        assert_relative_eq!(entropy_term(&dir(&[1.0, 1.0, 1.0])), -std::f64::consts::LN_2, epsilon = 1e-13);
        // ln(1/6) - 2(ψ(2) - ψ(4)) with ψ(4) - ψ(2) = 1/2 + 1/3
        let want = (1.0_f64 / 6.0).ln() + 2.0 * (0.5 + 1.0 / 3.0);
        assert_relative_eq!(entropy_term(&dir(&[2.0, 2.0])), want, epsilon = 1e-13);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(DirichletParams::from_slice(&[1.0]).is_err());
        assert!(DirichletParams::from_slice(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let a = [0.7, 2.5, 13.0];
        let mut g = [0.0; 3];
        entropy_grad(&a, &mut g);
        for j in 0..3 {
            let h = 1e-6 * a[j];
            let mut ap = a;
            let mut am = a;
            ap[j] += h;
            am[j] -= h;
            let fd = (entropy_of(&ap) - entropy_of(&am)) / (2.0 * h);
            assert_relative_eq!(g[j], fd, max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn correlation_row_sums_equal_mean(a in proptest::collection::vec(0.1f64..50.0, 2..7)) {
            let p = dir(&a);
            let c = correlation(&p);
            let mu = mean(&p);
            let rows = &c * DVector::from_element(a.len(), 1.0);
            for i in 0..a.len() {
                prop_assert!((rows[i] - mu[i]).abs() < 1e-12);
            }
            prop_assert!((mu.sum() - 1.0).abs() < 1e-14);
            let tr = c.trace();
            prop_assert!(tr > 0.0 && tr <= 1.0 + 1e-15);
        }

        #[test]
        fn correlation_is_psd(a in proptest::collection::vec(0.1f64..50.0, 2..7)) {
            let c = correlation(&dir(&a));
            let eig = c.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&l| l >= -1e-12));
        }
    }
}

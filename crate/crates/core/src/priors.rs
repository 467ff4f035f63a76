//! Elementwise-independent matrix priors for the patch endmembers and their
//! matched variational posteriors.
//!
//! | family    | prior params      | posterior params    |
//! |-----------|-------------------|---------------------|
//! | beta      | shapes (C, D)     | shapes (U, V)       |
//! | gaussian  | mean/var (Ā, Q)   | mean/var (U, Σ)     |
//! | lognormal | log-mean/var      | log-mean/var        |
//! | gamma     | shape/rate (C, D) | shape/rate (U, V)   |
//! | uniform   | none              | beta shapes (U, V)  |

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::apg::BoxProjection;
use crate::error::{HelenError, Result};
use crate::special::{digamma_unchecked, ln_gamma, trigamma_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Beta,
    Gaussian,
    Lognormal,
    Gamma,
    Uniform,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Beta, Family::Gaussian, Family::Lognormal, Family::Gamma, Family::Uniform];

    /// Family of the variational posterior paired with this prior.
    pub fn posterior_family(self) -> Family {
        match self {
            Family::Uniform => Family::Beta,
            f => f,
        }
    }

    /// Support of the distribution is a subset of [0, 1].
    pub fn is_bounded(self) -> bool {
        matches!(self, Family::Beta | Family::Uniform)
    }

    /// Families whose prior update has no derivation of its own and runs on
    /// the generic gradient path.
    pub fn is_experimental(self) -> bool {
        matches!(self, Family::Lognormal | Family::Gamma)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Beta => "beta",
            Family::Gaussian => "gaussian",
            Family::Lognormal => "lognormal",
            Family::Gamma => "gamma",
            Family::Uniform => "uniform",
        }
    }

    /// Projection boxes for the (first, second) parameter matrices.
    pub fn param_boxes(self) -> (BoxProjection, BoxProjection) {
        let pos = BoxProjection::default();
        let var = BoxProjection { lower: 1e-10, upper: 1e6 };
        match self {
            Family::Beta | Family::Gamma | Family::Uniform => (pos, pos),
            Family::Gaussian => (pos, var),
            Family::Lognormal => (BoxProjection { lower: -30.0, upper: 30.0 }, BoxProjection { lower: 1e-10, upper: 10.0 }),
        }
    }

    fn check(self, first: f64, second: f64) -> bool {
        let finite = first.is_finite() && second.is_finite();
        finite
            && match self {
                Family::Beta | Family::Gamma => first > 0.0 && second > 0.0,
                Family::Gaussian | Family::Lognormal => second > 0.0,
                Family::Uniform => true,
            }
    }
}

impl std::str::FromStr for Family {
    type Err = HelenError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| HelenError::Config(format!("unknown prior family '{s}'")))
    }
}

/// Prior parameters θ_A. For the uniform family both matrices are ones and
/// carry no free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub family: Family,
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
}

/// Patch posterior parameters φ_k^A.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub family: Family,
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
}

fn validate_pair(family: Family, first: &DMatrix<f64>, second: &DMatrix<f64>) -> Result<()> {
    if first.shape() != second.shape() {
        return Err(HelenError::invalid("parameter matrices differ in shape"));
    }
    if first.iter().zip(second.iter()).any(|(&a, &b)| !family.check(a, b)) {
        return Err(HelenError::invalid(format!("invalid {} parameters", family.name())));
    }
    Ok(())
}

impl PriorParams {
    pub fn new(family: Family, first: DMatrix<f64>, second: DMatrix<f64>) -> Result<Self> {
        validate_pair(family, &first, &second)?;
        Ok(Self { family, first, second })
    }

    pub fn uniform(bands: usize, n: usize) -> Self {
        Self { family: Family::Uniform, first: DMatrix::from_element(bands, n, 1.0), second: DMatrix::from_element(bands, n, 1.0) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.first.shape()
    }

    /// Prior mean of the endmember matrix.
    pub fn mean(&self) -> DMatrix<f64> {
        match self.family {
            Family::Uniform => DMatrix::from_element(self.first.nrows(), self.first.ncols(), 0.5),
            f => self.first.zip_map(&self.second, |a, b| entry_mean(f, a, b)),
        }
    }
}

impl PosteriorParams {
    pub fn new(family: Family, first: DMatrix<f64>, second: DMatrix<f64>) -> Result<Self> {
        if family == Family::Uniform {
            return Err(HelenError::invalid("uniform prior pairs with a beta posterior"));
        }
        validate_pair(family, &first, &second)?;
        Ok(Self { family, first, second })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.first.shape()
    }

    /// Elementwise variances of the endmember entries.
    pub fn variance(&self) -> DMatrix<f64> {
        self.first.zip_map(&self.second, |a, b| entry_var(self.family, a, b))
    }
}

/// Elementwise moments with partial derivatives w.r.t. the two parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EntryMoments {
    pub mean: f64,
    pub var: f64,
    pub dmean: [f64; 2],
    pub dvar: [f64; 2],
}

pub(crate) fn entry_mean(family: Family, a: f64, b: f64) -> f64 {
    match family {
        Family::Beta | Family::Uniform => a / (a + b),
        Family::Gaussian => a,
        Family::Lognormal => (a + 0.5 * b).exp(),
        Family::Gamma => a / b,
    }
}

pub(crate) fn entry_var(family: Family, a: f64, b: f64) -> f64 {
    match family {
        Family::Beta | Family::Uniform => {
            let s = a + b;
            a * b / (s * s * (s + 1.0))
        }
        Family::Gaussian => b,
        Family::Lognormal => b.exp_m1() * (2.0 * a + b).exp(),
        Family::Gamma => a / (b * b),
    }
}

pub(crate) fn entry_moments(family: Family, a: f64, b: f64) -> EntryMoments {
    match family {
        Family::Beta | Family::Uniform => {
            let s = a + b;
            let s2 = s * s;
            let var = a * b / (s2 * (s + 1.0));
            let common = a * b * (3.0 * s + 2.0) / (s2 * s * (s + 1.0) * (s + 1.0));
            EntryMoments {
                mean: a / s,
                var,
                dmean: [b / s2, -a / s2],
                dvar: [b / (s2 * (s + 1.0)) - common, a / (s2 * (s + 1.0)) - common],
            }
        }
        Family::Gaussian => EntryMoments { mean: a, var: b, dmean: [1.0, 0.0], dvar: [0.0, 1.0] },
        Family::Lognormal => {
            let mean = (a + 0.5 * b).exp();
            let e2 = (2.0 * a + b).exp();
            let var = b.exp_m1() * e2;
            EntryMoments { mean, var, dmean: [mean, 0.5 * mean], dvar: [2.0 * var, e2 * (2.0 * b.exp() - 1.0)] }
        }
        Family::Gamma => {
            let b2 = b * b;
            EntryMoments { mean: a / b, var: a / b2, dmean: [1.0 / b, -a / b2], dvar: [1.0 / b2, -2.0 * a / (b2 * b)] }
        }
    }
}

/// KL(q ‖ p) for one entry; `family` is the prior family.
pub(crate) fn entry_kl(family: Family, u: f64, v: f64, c: f64, d: f64) -> f64 {
    match family {
        Family::Beta | Family::Uniform => {
            let (c, d) = if family == Family::Uniform { (1.0, 1.0) } else { (c, d) };
            let s = u + v;
            (ln_gamma(c) + ln_gamma(d) - ln_gamma(c + d)) - (ln_gamma(u) + ln_gamma(v) - ln_gamma(s))
                + (u - c) * digamma_unchecked(u)
                + (v - d) * digamma_unchecked(v)
                + (c + d - s) * digamma_unchecked(s)
        }
        Family::Gaussian | Family::Lognormal => {
            let diff = u - c;
            0.5 * ((diff * diff + v) / d + (d / v).ln() - 1.0)
        }
        Family::Gamma => {
            (u - c) * digamma_unchecked(u) - ln_gamma(u) + ln_gamma(c) + c * (v.ln() - d.ln()) + u * (d - v) / v
        }
    }
}

/// Gradient of [`entry_kl`] as (∂u, ∂v, ∂c, ∂d). The prior part is zero
/// for the uniform family.
pub(crate) fn entry_kl_grad(family: Family, u: f64, v: f64, c: f64, d: f64) -> [f64; 4] {
    match family {
        Family::Beta | Family::Uniform => {
            let (c, d) = if family == Family::Uniform { (1.0, 1.0) } else { (c, d) };
            let s = u + v;
            let tri_s = trigamma_unchecked(s);
            let du = (u - c) * trigamma_unchecked(u) + (c + d - s) * tri_s;
            let dv = (v - d) * trigamma_unchecked(v) + (c + d - s) * tri_s;
            if family == Family::Uniform {
                return [du, dv, 0.0, 0.0];
            }
            let psi_cd = digamma_unchecked(c + d);
            let psi_s = digamma_unchecked(s);
            let dc = digamma_unchecked(c) - psi_cd - digamma_unchecked(u) + psi_s;
            let dd = digamma_unchecked(d) - psi_cd - digamma_unchecked(v) + psi_s;
            [du, dv, dc, dd]
        }
        Family::Gaussian | Family::Lognormal => {
            let diff = u - c;
            [diff / d, 0.5 * (1.0 / d - 1.0 / v), -diff / d, 0.5 * (1.0 / d - (diff * diff + v) / (d * d))]
        }
        Family::Gamma => {
            let du = (u - c) * trigamma_unchecked(u) + d / v - 1.0;
            let dv = c / v - u * d / (v * v);
            let dc = digamma_unchecked(c) - digamma_unchecked(u) + v.ln() - d.ln();
            let dd = u / v - c / d;
            [du, dv, dc, dd]
        }
    }
}

/// E[A_k].
pub fn posterior_mean(q: &PosteriorParams) -> DMatrix<f64> {
    q.first.zip_map(&q.second, |a, b| entry_mean(q.family, a, b))
}

/// E[A_kᵀ A_k] = μᵀμ + Diag(column sums of the entry variances).
pub fn posterior_correlation(q: &PosteriorParams) -> DMatrix<f64> {
    let mu = posterior_mean(q);
    correlation_from_moments(&mu, &q.variance())
}

pub(crate) fn correlation_from_moments(mu: &DMatrix<f64>, var: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = mu.tr_mul(mu);
    for (n, col) in var.column_iter().enumerate() {
        c[(n, n)] += col.sum();
    }
    c
}

fn check_pairing(q: &PosteriorParams, p: &PriorParams) -> Result<()> {
    if q.family != p.family.posterior_family() {
        return Err(HelenError::invalid(format!(
            "{} posterior does not pair with {} prior",
            q.family.name(),
            p.family.name()
        )));
    }
    if q.shape() != p.shape() {
        return Err(HelenError::invalid("posterior and prior shapes differ"));
    }
    Ok(())
}

/// KL(q_k ‖ p_θ) summed over all entries.
pub fn kl_to_prior(q: &PosteriorParams, p: &PriorParams) -> Result<f64> {
    check_pairing(q, p)?;
    Ok(kl_unchecked(q, p))
}

pub(crate) fn kl_unchecked(q: &PosteriorParams, p: &PriorParams) -> f64 {
    let mut total = 0.0;
    for i in 0..q.first.len() {
        total += entry_kl(p.family, q.first[i], q.second[i], p.first[i], p.second[i]);
    }
    total
}

/// Gradients of [`kl_to_prior`] with respect to both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradients {
    pub posterior_first: DMatrix<f64>,
    pub posterior_second: DMatrix<f64>,
    pub prior_first: DMatrix<f64>,
    pub prior_second: DMatrix<f64>,
}

pub fn kl_gradients(q: &PosteriorParams, p: &PriorParams) -> Result<KlGradients> {
    check_pairing(q, p)?;
    let (m, n) = q.shape();
    let mut g = KlGradients {
        posterior_first: DMatrix::zeros(m, n),
        posterior_second: DMatrix::zeros(m, n),
        prior_first: DMatrix::zeros(m, n),
        prior_second: DMatrix::zeros(m, n),
    };
    for i in 0..q.first.len() {
        let [du, dv, dc, dd] = entry_kl_grad(p.family, q.first[i], q.second[i], p.first[i], p.second[i]);
        g.posterior_first[i] = du;
        g.posterior_second[i] = dv;
        g.prior_first[i] = dc;
        g.prior_second[i] = dd;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn post(f: Family, a: f64, b: f64) -> PosteriorParams {
        PosteriorParams::new(f, mat(a), mat(b)).unwrap()
    }

    fn prior(f: Family, a: f64, b: f64) -> PriorParams {
        PriorParams::new(f, mat(a), mat(b)).unwrap()
    }

    #[test]
    fn mean_examples() {
        let q = PosteriorParams::new(Family::Beta, DMatrix::from_element(3, 2, 1.0), DMatrix::from_element(3, 2, 1.0)).unwrap();
        assert!(posterior_mean(&q).iter().all(|&v| v == 0.5));
        let u = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 1.5, 0.01]);
        let q = PosteriorParams::new(Family::Gaussian, u.clone(), DMatrix::from_element(2, 2, 0.1)).unwrap();
        assert_eq!(posterior_mean(&q), u);
        assert_relative_eq!(posterior_mean(&post(Family::Lognormal, 0.0, 0.25))[0], 0.125_f64.exp(), epsilon = 1e-15);
        assert_relative_eq!(posterior_mean(&post(Family::Gamma, 3.0, 2.0))[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn correlation_examples() {
        let s = 0.3;
        let q = PosteriorParams::new(Family::Gaussian, DMatrix::zeros(4, 3), DMatrix::from_element(4, 3, s)).unwrap();
        assert_relative_eq!(posterior_correlation(&q), DMatrix::identity(3, 3) * (s * 4.0), epsilon = 1e-15);
        assert_relative_eq!(posterior_correlation(&post(Family::Beta, 1.0, 1.0))[0], 1.0 / 3.0, epsilon = 1e-15);
        let u = DMatrix::from_row_slice(2, 3, &[2.0, 3.0, 1.5, 4.0, 0.7, 9.0]);
        let v = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.5, 0.4, 1.7, 2.0]);
        for f in [Family::Beta, Family::Gamma, Family::Lognormal, Family::Gaussian] {
            let q = PosteriorParams::new(f, u.clone(), v.clone()).unwrap();
            let mu = posterior_mean(&q);
            let c = posterior_correlation(&q);
            let mm = mu.tr_mul(&mu);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert_eq!(c[(i, j)], mm[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn kl_examples() {
        for f in [Family::Beta, Family::Gaussian, Family::Lognormal, Family::Gamma] {
            assert!(kl_to_prior(&post(f, 2.3, 0.7), &prior(f, 2.3, 0.7)).unwrap().abs() < 1e-12);
        }
        let beta = kl_to_prior(&post(Family::Beta, 2.0, 2.0), &prior(Family::Beta, 1.0, 1.0)).unwrap();
        let psi2 = 1.0 - 0.577_215_664_901_532_9;
        let psi4 = psi2 + 0.5 + 1.0 / 3.0;
        assert_relative_eq!(beta, 6.0_f64.ln() + 2.0 * psi2 - 2.0 * psi4, epsilon = 1e-12);
        assert_relative_eq!(beta, 0.125_1, epsilon = 1e-4);
        let uni = kl_to_prior(&post(Family::Beta, 2.0, 2.0), &PriorParams::uniform(1, 1)).unwrap();
        assert_relative_eq!(uni, beta, epsilon = 1e-14);
        let g = kl_to_prior(&post(Family::Gaussian, 1.0, 1.0), &prior(Family::Gaussian, 0.0, 2.0)).unwrap();
        assert_relative_eq!(g, 0.5 * 2.0_f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn gamma_kl_is_q_relative_to_p() {
        // KL(Gamma(2, 1) ‖ Gamma(1, 1)) = ψ(2) − ln Γ(2) + ln Γ(1) + 0 + 0 = 1 − γ_E − 0
        let kl = kl_to_prior(&post(Family::Gamma, 2.0, 1.0), &prior(Family::Gamma, 1.0, 1.0)).unwrap();
        assert_relative_eq!(kl, 1.0 - 0.577_215_664_901_532_9, epsilon = 1e-12);
    }

    #[test]
    fn family_mismatch_rejected() {
        let r = kl_to_prior(&post(Family::Gamma, 2.0, 1.0), &prior(Family::Beta, 1.0, 1.0));
        assert!(matches!(r, Err(HelenError::InvalidArgument(_))));
        assert!(kl_gradients(&post(Family::Beta, 2.0, 1.0), &prior(Family::Gaussian, 1.0, 1.0)).is_err());
        assert!(PosteriorParams::new(Family::Uniform, mat(1.0), mat(1.0)).is_err());
    }

    #[test]
    fn gradients_vanish_at_prior() {
        for f in [Family::Beta, Family::Gaussian, Family::Lognormal, Family::Gamma] {
            let g = kl_gradients(&post(f, 1.7, 0.9), &prior(f, 1.7, 0.9)).unwrap();
            for v in [g.prior_first[0], g.prior_second[0], g.posterior_first[0], g.posterior_second[0]] {
                assert!(v.abs() < 1e-12, "{f:?}: {v}");
            }
        }
    }

    #[test]
    fn gaussian_prior_gradient_closed_form() {
        let g = kl_gradients(&post(Family::Gaussian, 0.4, 0.2), &prior(Family::Gaussian, 1.0, 0.5)).unwrap();
        assert_relative_eq!(g.prior_first[0], (1.0 - 0.4) / 0.5, epsilon = 1e-15);
    }

    #[test]
    fn beta_gradient_at_reference_point() {
        let q = post(Family::Beta, 2.0, 2.0);
        let p = prior(Family::Beta, 1.0, 1.0);
        let g = kl_gradients(&q, &p).unwrap();
        let h = 1e-5;
        let fd = (kl_to_prior(&post(Family::Beta, 2.0 + h, 2.0), &p).unwrap()
            - kl_to_prior(&post(Family::Beta, 2.0 - h, 2.0), &p).unwrap())
            / (2.0 * h);
        assert_relative_eq!(g.posterior_first[0], fd, max_relative = 1e-7);
    }

    #[test]
    fn moment_derivatives_match_finite_differences() {
        for f in [Family::Beta, Family::Gaussian, Family::Lognormal, Family::Gamma] {
            let (a, b) = (1.3, 0.8);
            let m = entry_moments(f, a, b);
            let h = 1e-6;
            let dm_a = (entry_mean(f, a + h, b) - entry_mean(f, a - h, b)) / (2.0 * h);
            let dm_b = (entry_mean(f, a, b + h) - entry_mean(f, a, b - h)) / (2.0 * h);
            let dv_a = (entry_var(f, a + h, b) - entry_var(f, a - h, b)) / (2.0 * h);
            let dv_b = (entry_var(f, a, b + h) - entry_var(f, a, b - h)) / (2.0 * h);
            assert_relative_eq!(m.dmean[0], dm_a, epsilon = 1e-8, max_relative = 1e-6);
            assert_relative_eq!(m.dmean[1], dm_b, epsilon = 1e-8, max_relative = 1e-6);
            assert_relative_eq!(m.dvar[0], dv_a, epsilon = 1e-8, max_relative = 1e-6);
            assert_relative_eq!(m.dvar[1], dv_b, epsilon = 1e-8, max_relative = 1e-6);
            assert_relative_eq!(m.mean, entry_mean(f, a, b));
            assert_relative_eq!(m.var, entry_var(f, a, b));
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_nonnegative(u in 0.2f64..30.0, v in 0.2f64..30.0, c in 0.2f64..30.0, d in 0.2f64..30.0) {
            for f in [Family::Beta, Family::Gamma, Family::Gaussian, Family::Lognormal] {
                let kl = kl_to_prior(&post(f, u, v), &prior(f, c, d)).unwrap();
                proptest::prop_assert!(kl >= -1e-10, "{:?} {}", f, kl);
            }
            let kl = kl_to_prior(&post(Family::Beta, u, v), &PriorParams::uniform(1, 1)).unwrap();
            proptest::prop_assert!(kl >= -1e-10);
        }

        #[test]
        fn kl_strictly_positive_off_prior(u in 0.5f64..20.0, v in 0.5f64..20.0, eps in 0.05f64..0.5) {
            for f in [Family::Beta, Family::Gamma, Family::Gaussian, Family::Lognormal] {
                let kl = kl_to_prior(&post(f, u * (1.0 + eps), v), &prior(f, u, v)).unwrap();
                proptest::prop_assert!(kl > 0.0);
            }
        }
    }
}

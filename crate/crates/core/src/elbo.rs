//! Evidence lower bound: the per-pixel term ℓ_{t,k}, the outlier mixing
//! term g_t, the per-patch bound ℓ_k and the total objective.
//!
//! The additive constant of ℓ_{t,k} is fixed to −(M/2) ln 2π + ln (N−1)!,
//! the Gaussian normalizer plus the log-density of the uniform Dirichlet
//! prior, so `exp(ℓ_{t,k})` lower-bounds the nominal pixel density.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dirichlet::{correlation_of, entropy_grad, entropy_of, DirichletParams};
use crate::error::{HelenError, Result};
use crate::model::{log_outlier_density, HsiCube, ModelParameters, OutlierDensity, PatchGrid, VariationalState};
use crate::priors::{correlation_from_moments, entry_kl_grad, entry_moments, kl_to_prior, kl_unchecked, posterior_correlation, posterior_mean, Family, PosteriorParams, PriorParams};
use crate::special::{compensated_sum, ln_gamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// First and second moments of a patch posterior: E[A] (M x N) and E[AᵀA] (N x N).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMoments {
    pub mean: DMatrix<f64>,
    pub corr: DMatrix<f64>,
}

impl PatchMoments {
    pub fn of(q: &PosteriorParams) -> Self {
        Self { mean: posterior_mean(q), corr: posterior_correlation(q) }
    }
}

/// The data-dependent pieces of ℓ_{t,k}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSuffStats {
    /// yᵀy
    pub y_norm_sq: f64,
    /// yᵀ μ_A μ_s
    pub cross: f64,
    /// tr(C_A C_s)
    pub trace_term: f64,
}

impl PixelSuffStats {
    /// E‖y − A s‖² under the variational posteriors.
    pub fn expected_residual(&self) -> f64 {
        self.y_norm_sq - 2.0 * self.cross + self.trace_term
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// μ_Aᵀ y.
fn project_pixel(mean_a: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(mean_a.ncols(), mean_a.column_iter().map(|col| dot(col.as_slice(), y)))
}

/// tr(C_A C_s) with C_s = (Diag(α) + ααᵀ) / (α0(α0 + 1)).
fn trace_with_dirichlet(corr_a: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let a0: f64 = alpha.iter().sum();
    let mut num = 0.0;
    for i in 0..n {
        num += corr_a[(i, i)] * alpha[i];
        for j in 0..n {
            num += alpha[i] * corr_a[(i, j)] * alpha[j];
        }
    }
    num / (a0 * (a0 + 1.0))
}

pub(crate) fn suff_stats_with(y: &[f64], moments: &PatchMoments, alpha: &[f64]) -> PixelSuffStats {
    let a0: f64 = alpha.iter().sum();
    let b = project_pixel(&moments.mean, y);
    PixelSuffStats {
        y_norm_sq: dot(y, y),
        cross: dot(b.as_slice(), alpha) / a0,
        trace_term: trace_with_dirichlet(&moments.corr, alpha),
    }
}

pub fn pixel_suff_stats(y: &[f64], q_a: &PosteriorParams, q_s: &DirichletParams) -> Result<PixelSuffStats> {
    check_pixel(y, q_a, q_s)?;
    Ok(suff_stats_with(y, &PatchMoments::of(q_a), q_s.alpha().as_slice()))
}

fn check_pixel(y: &[f64], q_a: &PosteriorParams, q_s: &DirichletParams) -> Result<()> {
    let (m, n) = q_a.shape();
    if y.len() != m || q_s.len() != n {
        return Err(HelenError::invalid(format!(
            "pixel of length {} / Dirichlet of length {} do not match a {m}x{n} endmember posterior",
            y.len(),
            q_s.len()
        )));
    }
    Ok(())
}

fn check_noise(noise_var: f64) -> Result<()> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(HelenError::Domain { name: "noise_var", value: noise_var });
    }
    Ok(())
}

/// ℓ_{t,k} assembled from its sufficient statistics and the Dirichlet entropy.
pub fn pixel_elbo_from_stats(stats: &PixelSuffStats, entropy: f64, noise_var: f64, bands: usize, n_endmembers: usize) -> f64 {
    let m = bands as f64;
    -stats.expected_residual() / (2.0 * noise_var) - 0.5 * m * (noise_var.ln() + LN_2PI)
        + entropy
        + ln_gamma(n_endmembers as f64)
}

pub(crate) fn pixel_elbo_with(y: &[f64], noise_var: f64, moments: &PatchMoments, alpha: &[f64]) -> f64 {
    let stats = suff_stats_with(y, moments, alpha);
    pixel_elbo_from_stats(&stats, entropy_of(alpha), noise_var, y.len(), alpha.len())
}

/// ℓ_{t,k}(σ², φ_k^A, α_t; y_t).
pub fn pixel_elbo(y: &[f64], noise_var: f64, q_a: &PosteriorParams, q_s: &DirichletParams) -> Result<f64> {
    check_noise(noise_var)?;
    check_pixel(y, q_a, q_s)?;
    Ok(pixel_elbo_with(y, noise_var, &PatchMoments::of(q_a), q_s.alpha().as_slice()))
}

/// ℓ_{t,k} as a function of α_t alone, with its gradient.
#[derive(Debug, Clone)]
pub struct AlphaObjective<'a> {
    b: DVector<f64>,
    corr_a: &'a DMatrix<f64>,
    y_norm_sq: f64,
    noise_var: f64,
    constant: f64,
}

impl<'a> AlphaObjective<'a> {
    pub fn new(y: &[f64], moments: &'a PatchMoments, noise_var: f64) -> Self {
        let n = moments.mean.ncols();
        let m = y.len() as f64;
        Self {
            b: project_pixel(&moments.mean, y),
            corr_a: &moments.corr,
            y_norm_sq: dot(y, y),
            noise_var,
            constant: -0.5 * m * (noise_var.ln() + LN_2PI) + ln_gamma(n as f64),
        }
    }

    pub fn value(&self, alpha: &[f64]) -> f64 {
        let a0: f64 = alpha.iter().sum();
        let cross = dot(self.b.as_slice(), alpha) / a0;
        let trace = trace_with_dirichlet(self.corr_a, alpha);
        -(self.y_norm_sq - 2.0 * cross + trace) / (2.0 * self.noise_var) + entropy_of(alpha) + self.constant
    }

    pub fn value_and_grad(&self, alpha: &[f64]) -> (f64, Vec<f64>) {
        let n = alpha.len();
        let a0: f64 = alpha.iter().sum();
        let ba = dot(self.b.as_slice(), alpha);
        let cross = ba / a0;
        let c = self.corr_a;
        let mut c_alpha = vec![0.0; n];
        let mut num = 0.0;
        for i in 0..n {
            for j in 0..n {
                c_alpha[i] += c[(i, j)] * alpha[j];
            }
            num += c[(i, i)] * alpha[i] + alpha[i] * c_alpha[i];
        }
        let den = a0 * (a0 + 1.0);
        let trace = num / den;
        let value = -(self.y_norm_sq - 2.0 * cross + trace) / (2.0 * self.noise_var) + entropy_of(alpha) + self.constant;

        let mut grad = vec![0.0; n];
        entropy_grad(alpha, &mut grad);
        let inv_var = 1.0 / self.noise_var;
        let dden = 2.0 * a0 + 1.0;
        for j in 0..n {
            let dcross = self.b[j] / a0 - ba / (a0 * a0);
            let dtrace = ((c[(j, j)] + 2.0 * c_alpha[j]) * den - num * dden) / (den * den);
            grad[j] += inv_var * dcross - 0.5 * inv_var * dtrace;
        }
        (value, grad)
    }
}

/// g_t(ω, γ) = ω log(γ p_out / ω) + (1−ω) log((1−γ)/(1−ω)), with 0·log(·/0) = 0.
pub fn mixing_term(omega: f64, gamma: f64, log_pout: f64) -> f64 {
    let omega_bar = 1.0 - omega;
    let outlier = if omega > 0.0 { omega * (gamma.ln() + log_pout - omega.ln()) } else { 0.0 };
    let nominal = if omega_bar > 0.0 { omega_bar * ((1.0 - gamma).ln() - omega_bar.ln()) } else { 0.0 };
    outlier + nominal
}

/// Weighted Dirichlet statistics of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSuffStats {
    /// R_s = Σ ω̄_t C_s(α_t), N x N
    pub r_s: DMatrix<f64>,
    /// Y_s = Σ ω̄_t μ_s(α_t) y_tᵀ, N x M
    pub y_s: DMatrix<f64>,
    /// Σ ω̄_t
    pub weight: f64,
    /// Σ ω̄_t y_tᵀ y_t
    pub y_norm_sq: f64,
}

impl PatchSuffStats {
    pub fn zeros(bands: usize, n: usize) -> Self {
        Self { r_s: DMatrix::zeros(n, n), y_s: DMatrix::zeros(n, bands), weight: 0.0, y_norm_sq: 0.0 }
    }

    fn add_pixel(&mut self, y: &[f64], alpha: &[f64], omega: f64) {
        let w = 1.0 - omega;
        if w == 0.0 {
            return;
        }
        let a0: f64 = alpha.iter().sum();
        self.r_s += correlation_of(alpha) * w;
        for (n, &a) in alpha.iter().enumerate() {
            let s = w * a / a0;
            for (m, &v) in y.iter().enumerate() {
                self.y_s[(n, m)] += s * v;
            }
        }
        self.weight += w;
        self.y_norm_sq += w * dot(y, y);
    }

    pub fn merge(&mut self, other: &PatchSuffStats) {
        self.r_s += &other.r_s;
        self.y_s += &other.y_s;
        self.weight += other.weight;
        self.y_norm_sq += other.y_norm_sq;
    }
}

pub fn patch_suff_stats(pixels: &[&[f64]], q_s: &[DirichletParams], omega: &[f64]) -> Result<PatchSuffStats> {
    if pixels.is_empty() || pixels.len() != q_s.len() || pixels.len() != omega.len() {
        return Err(HelenError::invalid("patch lists must be non-empty and aligned"));
    }
    let mut st = PatchSuffStats::zeros(pixels[0].len(), q_s[0].len());
    for ((y, q), &w) in pixels.iter().zip(q_s).zip(omega) {
        st.add_pixel(y, q.alpha().as_slice(), w);
    }
    Ok(st)
}

pub(crate) fn suff_stats_for(cube: &HsiCube, members: &[usize], alpha: &DMatrix<f64>, omega: &[f64]) -> PatchSuffStats {
    let mut st = PatchSuffStats::zeros(cube.bands(), alpha.nrows());
    for &t in members {
        st.add_pixel(cube.pixel(t), alpha.column(t).as_slice(), omega[t]);
    }
    st
}

/// The part of ℓ_k that depends on the patch posterior parameters:
/// (1/σ²) tr(μ_A Y_s) − (1/2σ²) tr(C_A R_s) − KL(q_k ‖ p).
#[derive(Debug, Clone)]
pub struct PatchObjective<'a> {
    pub stats: &'a PatchSuffStats,
    pub noise_var: f64,
    pub prior: &'a PriorParams,
    pub family: Family,
}

/// Value and gradients of a [`PatchObjective`] (gradients are `M x N`).
#[derive(Debug, Clone)]
pub struct PatchObjectiveEval {
    pub value: f64,
    pub grad_first: DMatrix<f64>,
    pub grad_second: DMatrix<f64>,
}

impl<'a> PatchObjective<'a> {
    pub fn new(stats: &'a PatchSuffStats, noise_var: f64, prior: &'a PriorParams) -> Self {
        Self { stats, noise_var, prior, family: prior.family.posterior_family() }
    }

    pub fn evaluate(&self, first: &DMatrix<f64>, second: &DMatrix<f64>) -> PatchObjectiveEval {
        let (m, n) = first.shape();
        let mut mean = DMatrix::zeros(m, n);
        let mut moments = Vec::with_capacity(m * n);
        for i in 0..m * n {
            let em = entry_moments(self.family, first[i], second[i]);
            mean[i] = em.mean;
            moments.push(em);
        }
        let r = &self.stats.r_s;
        let mr = &mean * r;
        let inv = 1.0 / self.noise_var;
        let mut value = 0.0;
        let mut grad_first = DMatrix::zeros(m, n);
        let mut grad_second = DMatrix::zeros(m, n);
        let mut kl = 0.0;
        for col in 0..n {
            let r_nn = r[(col, col)];
            for row in 0..m {
                let i = col * m + row;
                let ys = self.stats.y_s[(col, row)];
                let em = &moments[i];
                value += inv * (em.mean * ys) - 0.5 * inv * (mr[i] * em.mean + em.var * r_nn);
                let d_mean = inv * (ys - mr[i]);
                let d_var = -0.5 * inv * r_nn;
                let (c, d) = (self.prior.first[i], self.prior.second[i]);
                kl += crate::priors::entry_kl(self.prior.family, first[i], second[i], c, d);
                let g = entry_kl_grad(self.prior.family, first[i], second[i], c, d);
                grad_first[i] = d_mean * em.dmean[0] + d_var * em.dvar[0] - g[0];
                grad_second[i] = d_mean * em.dmean[1] + d_var * em.dvar[1] - g[1];
            }
        }
        PatchObjectiveEval { value: value - kl, grad_first, grad_second }
    }
}

/// ℓ_k = Σ_t [ω̄_t ℓ_{t,k} + g_t] − KL(q_k ‖ p).
#[allow(clippy::too_many_arguments)]
pub fn patch_elbo(
    pixels: &[&[f64]],
    noise_var: f64,
    gamma: f64,
    q_a: &PosteriorParams,
    prior: &PriorParams,
    q_s: &[DirichletParams],
    omega: &[f64],
    outlier: &OutlierDensity,
) -> Result<f64> {
    check_noise(noise_var)?;
    if pixels.is_empty() || pixels.len() != q_s.len() || pixels.len() != omega.len() {
        return Err(HelenError::invalid("patch lists must be non-empty and aligned"));
    }
    for (y, q) in pixels.iter().zip(q_s) {
        check_pixel(y, q_a, q)?;
    }
    let kl = kl_to_prior(q_a, prior)?;
    let moments = PatchMoments::of(q_a);
    let terms = pixels.iter().zip(q_s).zip(omega).map(|((y, q), &w)| {
        pixel_term(y, noise_var, gamma, &moments, q.alpha().as_slice(), w, outlier)
    });
    Ok(compensated_sum(terms) - kl)
}

fn pixel_term(y: &[f64], noise_var: f64, gamma: f64, moments: &PatchMoments, alpha: &[f64], omega: f64, outlier: &OutlierDensity) -> f64 {
    let g = mixing_term(omega, gamma, log_outlier_density(y, outlier));
    if omega < 1.0 {
        (1.0 - omega) * pixel_elbo_with(y, noise_var, moments, alpha) + g
    } else {
        g
    }
}

pub(crate) fn patch_elbo_in_cube(cube: &HsiCube, members: &[usize], model: &ModelParameters, state: &VariationalState, k: usize) -> f64 {
    let q_a = &state.patch_posteriors[k];
    let moments = PatchMoments { mean: posterior_mean(q_a), corr: correlation_from_moments(&posterior_mean(q_a), &q_a.variance()) };
    let terms = members.iter().map(|&t| {
        pixel_term(
            cube.pixel(t),
            model.noise_var,
            model.outlier_rate,
            &moments,
            state.alpha.column(t).as_slice(),
            state.omega[t],
            &model.outlier_density,
        )
    });
    compensated_sum(terms) - kl_unchecked(q_a, &model.prior)
}

/// L̂(θ, φ; Y) = Σ_k ℓ_k. Patch terms are evaluated in parallel and summed
/// with compensated summation in patch order.
pub fn total_elbo(cube: &HsiCube, grid: &PatchGrid, model: &ModelParameters, state: &VariationalState) -> Result<f64> {
    check_noise(model.noise_var)?;
    let t = cube.n_pixels();
    if grid.assignment.len() != t || state.alpha.ncols() != t || state.omega.len() != t {
        return Err(HelenError::invalid("cube, grid and state disagree on pixel count"));
    }
    if state.patch_posteriors.len() != grid.n_patches() {
        return Err(HelenError::invalid("one posterior per patch required"));
    }
    for q in &state.patch_posteriors {
        if q.family != model.prior.family.posterior_family() || q.shape() != model.prior.shape() {
            return Err(HelenError::invalid("patch posterior does not match prior"));
        }
    }
    let per_patch: Vec<f64> = grid
        .members
        .par_iter()
        .enumerate()
        .map(|(k, members)| patch_elbo_in_cube(cube, members, model, state, k))
        .collect();
    Ok(compensated_sum(per_patch))
}

//! Alternating maximization of the ELBO.
//!
//! One sweep updates the variational parameters (α_t by APG, then the patch
//! posteriors, then ω_t in closed form) followed by the model parameters
//! (prior, σ², γ). Each step is an exact maximizer or a monotone ascent step
//! on the total ELBO, so the per-sweep trace is non-decreasing.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apg::{maximize, maximize_log_coords, ApgConfig, BoxProjection, Bounds, StepMode};
use crate::dirichlet::{ALPHA_MAX, ALPHA_MIN};
use crate::elbo::{suff_stats_for, suff_stats_with, total_elbo, AlphaObjective, PatchMoments, PatchObjective, PatchSuffStats};
use crate::error::{HelenError, Result};
use crate::io::opt_matrix_rows;
use crate::model::{log_outlier_density, partition_image, HsiCube, ModelParameters, OutlierDensity, PatchGrid, UnmixResult, VariationalState};
use crate::priors::{entry_kl, entry_kl_grad, entry_moments, entry_var, posterior_mean, Family, PosteriorParams, PriorParams};

const BETA_CONCENTRATION: f64 = 20.0;
const GAUSS_INIT_VAR: f64 = 0.01;
const OMEGA_INIT: f64 = 0.01;
const GAMMA_MIN: f64 = 1e-6;
const NOISE_MIN: f64 = 1e-12;
const Q_MIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    UserEndmembers,
    SuccessiveProjection,
    RandomSimplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub mode: InitMode,
    /// `M x N`, stored in JSON as one row per band.
    #[serde(default, with = "opt_matrix_rows", skip_serializing_if = "Option::is_none")]
    pub endmembers: Option<DMatrix<f64>>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { mode: InitMode::SuccessiveProjection, endmembers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub prior_family: Family,
    pub n_endmembers: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub max_sweeps: usize,
    #[serde(rename = "rel_tol_mean_A")]
    pub rel_tol_mean_a: f64,
    pub apg: ApgConfig,
    pub outlier: OutlierDensity,
    pub seed: u64,
    pub init: InitSpec,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            prior_family: Family::Beta,
            n_endmembers: 3,
            patch_rows: 5,
            patch_cols: 5,
            max_sweeps: 300,
            rel_tol_mean_a: 1e-5,
            apg: ApgConfig::default(),
            outlier: OutlierDensity::default(),
            seed: 0,
            init: InitSpec::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_endmembers < 2 {
            return Err(HelenError::Config("n_endmembers must be >= 2".into()));
        }
        if self.max_sweeps == 0 {
            return Err(HelenError::Config("max_sweeps must be >= 1".into()));
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(HelenError::Config("patch size must be >= 1".into()));
        }
        if !(self.rel_tol_mean_a >= 0.0) {
            return Err(HelenError::Config("rel_tol_mean_A must be non-negative".into()));
        }
        self.apg.validate()?;
        self.outlier.validate().map_err(|e| HelenError::Config(e.to_string()))?;
        if self.init.mode == InitMode::UserEndmembers {
            let Some(a) = &self.init.endmembers else {
                return Err(HelenError::Config("user-endmembers init needs an endmember matrix".into()));
            };
            if a.ncols() != self.n_endmembers {
                return Err(HelenError::Config("initial endmembers must have n_endmembers columns".into()));
            }
            if self.prior_family.is_bounded() && a.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(HelenError::Config("bounded families need initial endmembers in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Progress of one sweep, handed to the caller's sink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub elbo: f64,
    pub noise_var: f64,
    pub outlier_rate: f64,
    pub seconds: f64,
}

/// ω_t = γ p_out / (γ p_out + (1−γ) exp ℓ_{t,k}), evaluated as a logistic of
/// the log-odds.
pub fn update_omega(log_pout: f64, gamma: f64, pixel_elbo_value: f64) -> f64 {
    if gamma <= 0.0 {
        return 0.0;
    }
    if gamma >= 1.0 {
        return 1.0;
    }
    let z = (gamma.ln() + log_pout) - ((1.0 - gamma).ln() + pixel_elbo_value);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Outcome of the σ² update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseUpdate {
    pub value: f64,
    /// Set when Σ ω̄_t = 0 and the previous value was kept.
    pub degenerate: bool,
}

/// σ² = Σ_k ε_k / (M Σ_t ω̄_t), where `residuals[k]` is the ω̄-weighted
/// expected squared residual Σ ω̄_t (yᵀy − 2yᵀμ_Aμ_s + tr(C_A C_s)) of patch k.
pub fn update_noise_var(residuals: &[f64], total_weight: f64, bands: usize, previous: f64) -> NoiseUpdate {
    if !(total_weight > 0.0) {
        return NoiseUpdate { value: previous, degenerate: true };
    }
    let eps: f64 = residuals.iter().sum();
    NoiseUpdate { value: (eps / (bands as f64 * total_weight)).max(NOISE_MIN), degenerate: false }
}

/// γ = (1/T) Σ ω_t.
pub fn update_gamma(omega: &[f64]) -> f64 {
    omega.iter().sum::<f64>() / omega.len() as f64
}

/// Σ_k = 1 / (1/Q + 1 diag(R_s)ᵀ / σ²), elementwise.
pub fn update_gaussian_sigma(q: &DMatrix<f64>, r_s: &DMatrix<f64>, noise_var: f64) -> DMatrix<f64> {
    let var_box = Family::Gaussian.param_boxes().1;
    DMatrix::from_fn(q.nrows(), q.ncols(), |m, n| var_box.clamp(1.0 / (1.0 / q[(m, n)] + r_s[(n, n)] / noise_var)))
}

/// Ā = mean_k U_k, Q = mean_k [(U_k − Ā)² + Σ_k].
pub fn update_gaussian_prior(us: &[DMatrix<f64>], sigmas: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = us.len() as f64;
    let (m, n) = us[0].shape();
    let mut mean = DMatrix::zeros(m, n);
    for u in us {
        mean += u;
    }
    mean /= k;
    let mut q = DMatrix::zeros(m, n);
    for (u, s) in us.iter().zip(sigmas) {
        q += (u - &mean).map(|d| d * d) + s;
    }
    q /= k;
    q.apply(|v| *v = v.max(Q_MIN));
    (mean, q)
}

/// Gradient ascent on −Σ_k KL(q_k ‖ p) over the prior parameters, run as
/// an independent two-parameter APG per matrix entry. `steps` holds per-entry
/// warm-start step sizes and is updated in place.
pub fn update_prior_by_gradient(posteriors: &[PosteriorParams], prior: &PriorParams, apg: &ApgConfig, steps: &mut [f64]) -> Result<PriorParams> {
    let family = prior.family;
    if matches!(family, Family::Uniform) {
        return Ok(prior.clone());
    }
    if posteriors.iter().any(|q| q.family != family.posterior_family() || q.shape() != prior.shape()) {
        return Err(HelenError::invalid("posteriors do not pair with the prior"));
    }
    let (b1, b2) = family.param_boxes();
    let bounds = Bounds::from_segments(&[(1, b1), (1, b2)]);
    let log_mask = [first_is_positive(family), true];
    let entries = prior.first.len();
    let results: Vec<Result<([f64; 2], f64)>> = (0..entries)
        .into_par_iter()
        .map(|i| {
            let objective = |p: &[f64]| {
                let mut v = 0.0;
                let mut g = vec![0.0; 2];
                for q in posteriors {
                    let (u, w) = (q.first[i], q.second[i]);
                    v -= entry_kl(family, u, w, p[0], p[1]);
                    let d = entry_kl_grad(family, u, w, p[0], p[1]);
                    g[0] -= d[2];
                    g[1] -= d[3];
                }
                (v, g)
            };
            let mut start = [prior.first[i], prior.second[i]];
            if rescalable(family) {
                let qs: Vec<(f64, f64)> = posteriors.iter().map(|q| (q.first[i], q.second[i])).collect();
                (start[0], start[1]) = rescale_prior_entry(family, &qs, start[0], start[1], b1);
            }
            let cfg = ApgConfig { init_step: steps[i], mode: StepMode::Backtracking, ..*apg };
            let out = maximize_log_coords(objective, &start, &bounds, &cfg, &log_mask)?;
            Ok(([out.x[0], out.x[1]], out.step))
        })
        .collect();
    let mut next = prior.clone();
    for (i, r) in results.into_iter().enumerate() {
        let (p, step) = r?;
        next.first[i] = p[0];
        next.second[i] = p[1];
        steps[i] = step;
    }
    Ok(next)
}

/// Families whose two parameters can be scaled together without moving the mean.
fn rescalable(family: Family) -> bool {
    matches!(family, Family::Beta | Family::Gamma | Family::Uniform)
}

/// Whether the first parameter of `family` is positivity-constrained (and
/// so optimized in log coordinates).
fn first_is_positive(family: Family) -> bool {
    !matches!(family, Family::Lognormal | Family::Gaussian)
}

/// The beta-prior update of (C, D); see [`update_prior_by_gradient`].
pub fn update_beta_prior(posteriors: &[PosteriorParams], prior: &PriorParams, apg: &ApgConfig) -> Result<PriorParams> {
    if prior.family != Family::Beta {
        return Err(HelenError::invalid("update_beta_prior needs a beta prior"));
    }
    let mut steps = vec![apg.init_step; prior.first.len()];
    update_prior_by_gradient(posteriors, prior, apg, &mut steps)
}

/// Maximizer over [lo, hi] (with lo ≤ 0 ≤ hi) of a unimodal function given
/// its derivative, searching on the uphill side of 0 by bisection.
fn bisect_max<D: FnMut(f64) -> f64>(mut deriv: D, lo: f64, hi: f64) -> f64 {
    let d0 = deriv(0.0);
    let (mut a, mut b) = match d0 {
        d if d > 0.0 => (0.0, hi),
        d if d < 0.0 => (lo, 0.0),
        _ => return 0.0,
    };
    if d0 > 0.0 && deriv(hi) >= 0.0 {
        return hi;
    }
    if d0 < 0.0 && deriv(lo) <= 0.0 {
        return lo;
    }
    while b - a > 1e-7 {
        let m = 0.5 * (a + b);
        if deriv(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Exact line search along (u, v) → (u eᵗ, v eᵗ) for one beta or gamma
/// posterior entry. That direction leaves the entry mean fixed, so only
/// −weight·Var − KL changes; `weight` is R_nn / 2σ². Returns the start
/// unless the search strictly improves on it.
pub(crate) fn rescale_entry(prior: Family, u: f64, v: f64, c: f64, d: f64, weight: f64, bx: BoxProjection) -> (f64, f64) {
    let post = prior.posterior_family();
    let h = |t: f64| {
        let (a, b) = (u * t.exp(), v * t.exp());
        -weight * entry_var(post, a, b) - entry_kl(prior, a, b, c, d)
    };
    let dh = |t: f64| {
        let (a, b) = (u * t.exp(), v * t.exp());
        let m = entry_moments(post, a, b);
        let g = entry_kl_grad(prior, a, b, c, d);
        -weight * (m.dvar[0] * a + m.dvar[1] * b) - (g[0] * a + g[1] * b)
    };
    let lo = (bx.lower / u.min(v)).ln();
    let hi = (bx.upper / u.max(v)).ln();
    if !(lo <= 0.0 && hi >= 0.0) {
        return (u, v);
    }
    let t = bisect_max(dh, lo, hi);
    if h(t) > h(0.0) {
        (bx.clamp(u * t.exp()), bx.clamp(v * t.exp()))
    } else {
        (u, v)
    }
}

/// Same search for one prior entry (c, d) against all patch posteriors.
fn rescale_prior_entry(prior: Family, qs: &[(f64, f64)], c: f64, d: f64, bx: BoxProjection) -> (f64, f64) {
    let h = |t: f64| -qs.iter().map(|&(u, v)| entry_kl(prior, u, v, c * t.exp(), d * t.exp())).sum::<f64>();
    let dh = |t: f64| {
        let (a, b) = (c * t.exp(), d * t.exp());
        -qs.iter().map(|&(u, v)| {
            let g = entry_kl_grad(prior, u, v, a, b);
            g[2] * a + g[3] * b
        })
        .sum::<f64>()
    };
    let lo = (bx.lower / c.min(d)).ln();
    let hi = (bx.upper / c.max(d)).ln();
    if !(lo <= 0.0 && hi >= 0.0) {
        return (c, d);
    }
    let t = bisect_max(dh, lo, hi);
    if h(t) > h(0.0) {
        (bx.clamp(c * t.exp()), bx.clamp(d * t.exp()))
    } else {
        (c, d)
    }
}

/// Line search along α → α eᵗ, which keeps the abundance mean fixed.
fn rescale_alpha(obj: &AlphaObjective, alpha: &mut [f64]) {
    let scaled = |t: f64| alpha.iter().map(|a| (a * t.exp()).clamp(ALPHA_MIN, ALPHA_MAX)).collect::<Vec<f64>>();
    let dh = |t: f64| {
        let a = scaled(t);
        let (_, g) = obj.value_and_grad(&a);
        g.iter().zip(&a).map(|(g, a)| g * a).sum::<f64>()
    };
    let lo = (ALPHA_MIN / alpha.iter().cloned().fold(f64::INFINITY, f64::min)).ln();
    let hi = (ALPHA_MAX / alpha.iter().cloned().fold(0.0, f64::max)).ln();
    if !(lo <= 0.0 && hi >= 0.0) {
        return;
    }
    let t = bisect_max(dh, lo, hi);
    let next = scaled(t);
    if obj.value(&next) > obj.value(alpha) {
        alpha.copy_from_slice(&next);
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub(crate) fn spectral_norm_psd(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Rayleigh quotient underestimates; the final norm bound does not
    (a * &v).norm().max(lambda)
}

/// Picks `n` pixels by successive projection: repeatedly take the pixel with
/// the largest residual norm and project it out. Pixels far outside the
/// dominant `n`-dimensional subspace (gross outliers) are not eligible.
pub fn successive_projection(cube: &HsiCube, n: usize) -> Result<Vec<usize>> {
    let y = cube.values();
    let (m, t) = y.shape();
    if n > m {
        return Err(HelenError::invalid("more endmembers than bands"));
    }
    let gram = y * y.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(m, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let coeffs = basis.tr_mul(y);
    let resid = y - &basis * coeffs;
    let off_norms: Vec<f64> = resid.column_iter().map(|c| c.norm()).collect();
    let max_norm = y.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let med = median(&off_norms);
    let mad = median(&off_norms.iter().map(|v| (v - med).abs()).collect::<Vec<_>>());
    let cutoff = med + 10.0 * mad + 1e-8 * max_norm;
    let eligible: Vec<usize> = (0..t).filter(|&i| off_norms[i] <= cutoff).collect();
    if eligible.len() < n {
        return Err(HelenError::invalid("too few eligible pixels for successive projection"));
    }

    let mut r = DMatrix::from_fn(m, eligible.len(), |b, j| y[(b, eligible[j])]);
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let (best, norm) = r
            .column_iter()
            .map(|c| c.norm_squared())
            .enumerate()
            .fold((0, -1.0), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        if norm <= 0.0 {
            return Err(HelenError::invalid("data span fewer directions than endmembers"));
        }
        picked.push(eligible[best]);
        let u = r.column(best).normalize();
        let proj = u.tr_mul(&r);
        r -= &u * proj;
    }
    Ok(picked)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn count_distinct_pixels(cube: &HsiCube, limit: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for t in 0..cube.n_pixels() {
        let p = cube.pixel(t);
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

/// Initial endmember matrix (`M x N`) according to `cfg.init`.
pub fn initial_endmembers(cube: &HsiCube, cfg: &EngineConfig) -> Result<DMatrix<f64>> {
    let n = cfg.n_endmembers;
    if count_distinct_pixels(cube, n) < n {
        return Err(HelenError::invalid("fewer distinct pixels than endmembers"));
    }
    let raw = match cfg.init.mode {
        InitMode::UserEndmembers => {
            let a = cfg.init.endmembers.clone().ok_or_else(|| HelenError::Config("missing initial endmembers".into()))?;
            if a.nrows() != cube.bands() || a.ncols() != n {
                return Err(HelenError::invalid("initial endmembers do not match cube bands / n_endmembers"));
            }
            return Ok(a);
        }
        InitMode::SuccessiveProjection => successive_projection(cube, n)?,
        InitMode::RandomSimplex => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rand::seq::index::sample(&mut rng, cube.n_pixels(), n).into_vec()
        }
    };
    let mut a = DMatrix::from_fn(cube.bands(), n, |m, j| cube.values()[(m, raw[j])]);
    if cfg.prior_family.is_bounded() {
        a.apply(|v| *v = v.clamp(0.01, 0.99));
    } else {
        a.apply(|v| *v = v.max(0.01));
    }
    Ok(a)
}

/// Initial model and variational state for `cube`.
pub fn initialize(cube: &HsiCube, cfg: &EngineConfig) -> Result<(ModelParameters, VariationalState)> {
    cfg.validate()?;
    if cfg.n_endmembers > cube.bands() {
        return Err(HelenError::invalid("n_endmembers must not exceed the number of bands"));
    }
    let grid = partition_image(cube.rows(), cube.cols(), cfg.patch_rows.min(cube.rows()), cfg.patch_cols.min(cube.cols()))?;
    let a0 = initial_endmembers(cube, cfg)?;
    let (m, n) = a0.shape();
    let family = cfg.prior_family;
    let (first, second) = match family.posterior_family() {
        Family::Beta => (a0.map(|v| BETA_CONCENTRATION * v), a0.map(|v| BETA_CONCENTRATION * (1.0 - v))),
        Family::Gaussian => (a0.map(|v| v.max(1e-6)), DMatrix::from_element(m, n, GAUSS_INIT_VAR)),
        Family::Lognormal => (a0.map(|v| v.ln() - 0.5 * GAUSS_INIT_VAR), DMatrix::from_element(m, n, GAUSS_INIT_VAR)),
        Family::Gamma => (DMatrix::from_element(m, n, BETA_CONCENTRATION), a0.map(|v| BETA_CONCENTRATION / v)),
        Family::Uniform => unreachable!("posterior family is never uniform"),
    };
    let post = PosteriorParams::new(family.posterior_family(), first.clone(), second.clone())?;
    let prior = match family {
        Family::Uniform => PriorParams::uniform(m, n),
        f => PriorParams::new(f, first, second)?,
    };
    let power = cube.values().iter().map(|v| v * v).sum::<f64>() / cube.values().len() as f64;
    let model = ModelParameters {
        prior,
        noise_var: (1e-2 * power).max(NOISE_MIN),
        outlier_rate: OMEGA_INIT,
        outlier_density: cfg.outlier,
    };
    let state = VariationalState {
        alpha: DMatrix::from_element(n, cube.n_pixels(), 1.0),
        omega: vec![OMEGA_INIT; cube.n_pixels()],
        patch_posteriors: vec![post; grid.n_patches()],
    };
    Ok((model, state))
}

/// Alternating-maximization engine bound to one cube.
pub struct Engine<'a> {
    cube: &'a HsiCube,
    grid: PatchGrid,
    cfg: EngineConfig,
    pub model: ModelParameters,
    pub state: VariationalState,
    log_pout: Vec<f64>,
    alpha_steps: Vec<f64>,
    patch_steps: Vec<f64>,
    prior_steps: Vec<f64>,
    noise_degenerate: bool,
}

impl<'a> Engine<'a> {
    pub fn new(cube: &'a HsiCube, cfg: EngineConfig) -> Result<Self> {
        let (model, state) = initialize(cube, &cfg)?;
        Self::with_state(cube, cfg, model, state)
    }

    /// Engine starting from a caller-provided model and state.
    pub fn with_state(cube: &'a HsiCube, cfg: EngineConfig, model: ModelParameters, state: VariationalState) -> Result<Self> {
        cfg.validate()?;
        let grid = partition_image(cube.rows(), cube.cols(), cfg.patch_rows.min(cube.rows()), cfg.patch_cols.min(cube.cols()))?;
        let n = cfg.n_endmembers;
        if state.alpha.shape() != (n, cube.n_pixels()) || state.omega.len() != cube.n_pixels() {
            return Err(HelenError::invalid("state does not match cube"));
        }
        if state.patch_posteriors.len() != grid.n_patches() || model.prior.shape() != (cube.bands(), n) {
            return Err(HelenError::invalid("state does not match patch grid"));
        }
        if model.prior.family != cfg.prior_family {
            return Err(HelenError::invalid("model prior family differs from config"));
        }
        let log_pout = (0..cube.n_pixels()).map(|t| log_outlier_density(cube.pixel(t), &model.outlier_density)).collect();
        let init = cfg.apg.init_step;
        Ok(Self {
            cube,
            alpha_steps: vec![init; cube.n_pixels()],
            patch_steps: vec![init; grid.n_patches()],
            prior_steps: vec![init; model.prior.first.len()],
            grid,
            cfg,
            model,
            state,
            log_pout,
            noise_degenerate: false,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Whether the last σ² update hit the all-outlier case.
    pub fn noise_degenerate(&self) -> bool {
        self.noise_degenerate
    }

    pub fn elbo(&self) -> Result<f64> {
        total_elbo(self.cube, &self.grid, &self.model, &self.state)
    }

    fn backtracking(&self, init_step: f64) -> ApgConfig {
        ApgConfig { init_step, mode: StepMode::Backtracking, ..self.cfg.apg }
    }

    fn patch_moments(&self) -> Vec<PatchMoments> {
        self.state.patch_posteriors.par_iter().map(PatchMoments::of).collect()
    }

    fn patch_stats(&self) -> Vec<PatchSuffStats> {
        self.grid
            .members
            .par_iter()
            .map(|mem| suff_stats_for(self.cube, mem, &self.state.alpha, &self.state.omega))
            .collect()
    }

    /// α_t ← APG ascent on ℓ_{t,k}, independently per pixel.
    pub fn update_alpha(&mut self) -> Result<()> {
        let moments = self.patch_moments();
        let bounds = Bounds::uniform(self.cfg.n_endmembers, BoxProjection { lower: ALPHA_MIN, upper: ALPHA_MAX });
        let noise = self.model.noise_var;
        let log_mask = vec![true; self.cfg.n_endmembers];
        let results: Vec<Result<(Vec<f64>, f64)>> = (0..self.cube.n_pixels())
            .into_par_iter()
            .map(|t| {
                let k = self.grid.assignment[t];
                let obj = AlphaObjective::new(self.cube.pixel(t), &moments[k], noise);
                let cfg = self.backtracking(self.alpha_steps[t]);
                let mut start = self.state.alpha.column(t).as_slice().to_vec();
                rescale_alpha(&obj, &mut start);
                let out = maximize_log_coords(|a| obj.value_and_grad(a), &start, &bounds, &cfg, &log_mask)?;
                Ok((out.x, out.step))
            })
            .collect();
        for (t, r) in results.into_iter().enumerate() {
            let (x, step) = r?;
            self.state.alpha.column_mut(t).copy_from_slice(&x);
            self.alpha_steps[t] = step;
        }
        Ok(())
    }

    /// Patch posterior update: APG on both parameter matrices, or for the
    /// gaussian family fixed-step APG on U_k followed by the closed-form Σ_k.
    pub fn update_patch_posteriors(&mut self) -> Result<()> {
        let stats = self.patch_stats();
        let noise = self.model.noise_var;
        let prior = &self.model.prior;
        let family = prior.family.posterior_family();
        let (b1, b2) = family.param_boxes();
        let results: Vec<Result<(PosteriorParams, f64)>> = self
            .state
            .patch_posteriors
            .par_iter()
            .zip(stats.par_iter())
            .enumerate()
            .map(|(k, (q, st))| {
                let obj = PatchObjective::new(st, noise, prior);
                let (m, n) = q.shape();
                let len = m * n;
                if family == Family::Gaussian {
                    let lipschitz = spectral_norm_psd(&st.r_s) / noise + prior.second.iter().map(|v| 1.0 / (v * v)).sum::<f64>().sqrt();
                    let sigma = q.second.clone();
                    let f = |u: &[f64]| {
                        let e = obj.evaluate(&DMatrix::from_column_slice(m, n, u), &sigma);
                        (e.value, e.grad_first.as_slice().to_vec())
                    };
                    let cfg = ApgConfig { mode: StepMode::FixedLipschitz, ..self.cfg.apg };
                    let out = maximize(f, q.first.as_slice(), &Bounds::uniform(len, b1), &cfg, Some(lipschitz))?;
                    let u = DMatrix::from_column_slice(m, n, &out.x);
                    let sigma = update_gaussian_sigma(&prior.second, &st.r_s, noise);
                    Ok((PosteriorParams { family, first: u, second: sigma }, self.patch_steps[k]))
                } else {
                    let f = |x: &[f64]| {
                        let e = obj.evaluate(&DMatrix::from_column_slice(m, n, &x[..len]), &DMatrix::from_column_slice(m, n, &x[len..]));
                        let mut g = e.grad_first.as_slice().to_vec();
                        g.extend_from_slice(e.grad_second.as_slice());
                        (e.value, g)
                    };
                    let mut start = q.first.as_slice().to_vec();
                    start.extend_from_slice(q.second.as_slice());
                    if rescalable(prior.family) {
                        for i in 0..len {
                            let w = st.r_s[(i / m, i / m)] / (2.0 * noise);
                            (start[i], start[i + len]) = rescale_entry(prior.family, start[i], start[i + len], prior.first[i], prior.second[i], w, b1);
                        }
                    }
                    let bounds = Bounds::from_segments(&[(len, b1), (len, b2)]);
                    let mut log_mask = vec![first_is_positive(family); len];
                    log_mask.resize(2 * len, true);
                    let out = maximize_log_coords(f, &start, &bounds, &self.backtracking(self.patch_steps[k]), &log_mask)?;
                    let first = DMatrix::from_column_slice(m, n, &out.x[..len]);
                    let second = DMatrix::from_column_slice(m, n, &out.x[len..]);
                    Ok((PosteriorParams { family, first, second }, out.step))
                }
            })
            .collect();
        for (k, r) in results.into_iter().enumerate() {
            let (q, step) = r?;
            self.state.patch_posteriors[k] = q;
            self.patch_steps[k] = step;
        }
        Ok(())
    }

    /// ω_t in closed form from the current (post-update) α_t and patch posterior.
    pub fn update_omega_all(&mut self) {
        let moments = self.patch_moments();
        let noise = self.model.noise_var;
        let gamma = self.model.outlier_rate;
        let omega: Vec<f64> = (0..self.cube.n_pixels())
            .into_par_iter()
            .map(|t| {
                let k = self.grid.assignment[t];
                let alpha = self.state.alpha.column(t);
                let ell = crate::elbo::pixel_elbo_with(self.cube.pixel(t), noise, &moments[k], alpha.as_slice());
                update_omega(self.log_pout[t], gamma, ell)
            })
            .collect();
        self.state.omega = omega;
    }

    pub fn update_prior(&mut self) -> Result<()> {
        match self.model.prior.family {
            Family::Uniform => Ok(()),
            Family::Gaussian => {
                let us: Vec<DMatrix<f64>> = self.state.patch_posteriors.iter().map(|q| q.first.clone()).collect();
                let ss: Vec<DMatrix<f64>> = self.state.patch_posteriors.iter().map(|q| q.second.clone()).collect();
                let (mean, q) = update_gaussian_prior(&us, &ss);
                self.model.prior.first = mean;
                self.model.prior.second = q;
                Ok(())
            }
            _ => {
                let next = update_prior_by_gradient(&self.state.patch_posteriors, &self.model.prior, &self.cfg.apg, &mut self.prior_steps)?;
                self.model.prior = next;
                Ok(())
            }
        }
    }

    /// Per-patch ω̄-weighted expected residuals and their total weight.
    pub fn expected_residuals(&self) -> (Vec<f64>, f64) {
        let moments = self.patch_moments();
        let per_patch: Vec<(f64, f64)> = self
            .grid
            .members
            .par_iter()
            .enumerate()
            .map(|(k, mem)| {
                let mut eps = 0.0;
                let mut w = 0.0;
                for &t in mem {
                    let wt = 1.0 - self.state.omega[t];
                    if wt == 0.0 {
                        continue;
                    }
                    let st = suff_stats_with(self.cube.pixel(t), &moments[k], self.state.alpha.column(t).as_slice());
                    eps += wt * st.expected_residual();
                    w += wt;
                }
                (eps, w)
            })
            .collect();
        let eps = per_patch.iter().map(|p| p.0).collect();
        let w = per_patch.iter().map(|p| p.1).sum();
        (eps, w)
    }

    pub fn update_noise(&mut self) {
        let (eps, w) = self.expected_residuals();
        let up = update_noise_var(&eps, w, self.cube.bands(), self.model.noise_var);
        if up.degenerate {
            log::warn!("all pixels flagged as outliers; keeping sigma^2 = {}", up.value);
        }
        self.noise_degenerate = up.degenerate;
        self.model.noise_var = up.value;
    }

    pub fn update_outlier_rate(&mut self) {
        self.model.outlier_rate = update_gamma(&self.state.omega).clamp(GAMMA_MIN, 1.0 - GAMMA_MIN);
    }

    /// One full AM sweep in the fixed order α, patch posteriors, ω, prior, σ², γ.
    pub fn sweep(&mut self) -> Result<()> {
        self.update_alpha()?;
        self.update_patch_posteriors()?;
        self.update_omega_all();
        self.update_prior()?;
        self.update_noise();
        self.update_outlier_rate();
        Ok(())
    }

    pub fn posterior_means(&self) -> Vec<DMatrix<f64>> {
        self.state.patch_posteriors.iter().map(posterior_mean).collect()
    }

    pub fn into_result(self, elbo_trace: Vec<f64>, converged: bool) -> UnmixResult {
        let mut abundances = self.state.alpha.clone();
        for mut col in abundances.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        UnmixResult {
            endmembers: self.posterior_means(),
            abundances,
            outlier_scores: self.state.omega.clone(),
            iterations: elbo_trace.len(),
            elbo_trace,
            converged,
            model: self.model,
            grid: self.grid,
        }
    }
}

fn max_relative_change(prev: &[DMatrix<f64>], next: &[DMatrix<f64>]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(p, n)| (n - p).norm() / (p.norm() + 1e-12))
        .fold(0.0, f64::max)
}

pub fn run(cube: &HsiCube, cfg: &EngineConfig) -> Result<UnmixResult> {
    run_with_progress(cube, cfg, |_| {})
}

/// Runs the engine until the patch posterior means stop moving (relative
/// change below `rel_tol_mean_A`) or `max_sweeps` is reached.
pub fn run_with_progress<F: FnMut(&SweepRecord)>(cube: &HsiCube, cfg: &EngineConfig, mut sink: F) -> Result<UnmixResult> {
    let start = Instant::now();
    let mut engine = Engine::new(cube, cfg.clone())?;
    if cfg.prior_family.is_experimental() {
        log::warn!("{} prior is experimental", cfg.prior_family.name());
    }
    let mut trace = Vec::with_capacity(cfg.max_sweeps);
    let mut means = engine.posterior_means();
    let mut converged = false;
    for sweep in 1..=cfg.max_sweeps {
        engine.sweep()?;
        let elbo = engine.elbo()?;
        if !elbo.is_finite() {
            return Err(HelenError::NonFiniteElbo { sweep });
        }
        trace.push(elbo);
        sink(&SweepRecord {
            sweep,
            elbo,
            noise_var: engine.model.noise_var,
            outlier_rate: engine.model.outlier_rate,
            seconds: start.elapsed().as_secs_f64(),
        });
        let next = engine.posterior_means();
        let change = max_relative_change(&means, &next);
        means = next;
        if change < cfg.rel_tol_mean_a {
            converged = true;
            break;
        }
    }
    Ok(engine.into_result(trace, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use approx::assert_relative_eq;

    fn small_cube(seed: u64, n_outliers: usize) -> HsiCube {
        let cfg = SynthConfig { rows: 10, cols: 10, bands: 12, n_outliers, seed, ..Default::default() };
        generate(&cfg).unwrap().cube
    }

    fn small_config(family: Family) -> EngineConfig {
        let mut cfg = EngineConfig { prior_family: family, max_sweeps: 15, ..Default::default() };
        cfg.apg.max_iters = 5;
        cfg
    }

    #[test]
    fn fixed_step_gaussian_subproblem_matches_linear_solve() {
        let (m, n) = (3, 2);
        let noise = 0.3;
        let r_s = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.5]);
        let y_s = DMatrix::from_row_slice(2, 3, &[1.2, 0.8, 1.9, 0.6, 1.4, 0.9]);
        let mean = DMatrix::from_row_slice(3, 2, &[0.5, 0.4, 0.6, 0.7, 0.3, 0.5]);
        let q = DMatrix::from_row_slice(3, 2, &[0.2, 0.5, 0.1, 0.3, 0.4, 0.25]);
        let prior = PriorParams::new(Family::Gaussian, mean.clone(), q.clone()).unwrap();
        let stats = PatchSuffStats { r_s: r_s.clone(), y_s: y_s.clone(), weight: 3.0, y_norm_sq: 5.0 };
        // row m solves u (R_s/σ² + diag(1/Q_m)) = (Y_sᵀ)_m/σ² + (Ā/Q)_m
        let mut expect = DMatrix::zeros(m, n);
        for row in 0..m {
            let mut h = &r_s / noise;
            let mut b = nalgebra::DVector::zeros(n);
            for c in 0..n {
                h[(c, c)] += 1.0 / q[(row, c)];
                b[c] = y_s[(c, row)] / noise + mean[(row, c)] / q[(row, c)];
            }
            let u = h.lu().solve(&b).unwrap();
            for c in 0..n {
                expect[(row, c)] = u[c];
            }
        }
        assert!(expect.iter().all(|&v| v > 1e-3), "solution must be interior");
        let obj = PatchObjective::new(&stats, noise, &prior);
        let sigma = DMatrix::from_element(m, n, 0.05);
        let f = |u: &[f64]| {
            let e = obj.evaluate(&DMatrix::from_column_slice(m, n, u), &sigma);
            (e.value, e.grad_first.as_slice().to_vec())
        };
        let lipschitz = spectral_norm_psd(&r_s) / noise + q.iter().map(|v| 1.0 / (v * v)).sum::<f64>().sqrt();
        let cfg = ApgConfig { max_iters: 3000, mode: StepMode::FixedLipschitz, grad_tol: 0.0, ..Default::default() };
        let out = maximize(f, &[0.5; 6], &Bounds::uniform(6, BoxProjection::default()), &cfg, Some(lipschitz)).unwrap();
        for (a, b) in out.x.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn omega_examples() {
        assert_eq!(update_omega(-3.0, 0.0, -1.0), 0.0);
        assert_eq!(update_omega(-3.0, 1.0, -1.0), 1.0);
        assert_relative_eq!(update_omega(-1.0, 0.5, -1.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(update_omega(-10.0, 0.5, -12.0), 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-12);
        assert_relative_eq!(update_omega(-10.0, 0.5, -12.0), 0.8808, epsilon = 1e-4);
        // no underflow for very negative pixel terms
        assert_eq!(update_omega(-10.0, 0.5, -1e5), 1.0);
    }

    #[test]
    fn noise_examples() {
        let up = update_noise_var(&[4.0], 1.0, 1, 1.0);
        assert_eq!(up.value, 4.0);
        assert!(!up.degenerate);
        assert_eq!(update_noise_var(&[0.0], 3.0, 5, 1.0).value, NOISE_MIN);
        let up = update_noise_var(&[0.0], 0.0, 5, 0.25);
        assert!(up.degenerate);
        assert_eq!(up.value, 0.25);
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(update_gamma(&[0.0; 4]), 0.0);
        assert_eq!(update_gamma(&[1.0, 0.0, 0.0, 1.0]), 0.5);
    }

    #[test]
    fn gaussian_sigma_limits() {
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 1.0, 3.0]);
        assert_eq!(update_gaussian_sigma(&q, &DMatrix::zeros(2, 2), 0.1), q);
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 8.0]));
        let big = DMatrix::from_element(2, 2, 1e300);
        let s = update_gaussian_sigma(&big, &r, 0.2);
        for m in 0..2 {
            assert_relative_eq!(s[(m, 0)], 0.05, max_relative = 1e-12);
            assert_relative_eq!(s[(m, 1)], 0.025, max_relative = 1e-12);
        }
    }

    #[test]
    fn gaussian_prior_examples() {
        let u = [DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 2.0)];
        let s = [DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)];
        let (mean, q) = update_gaussian_prior(&u, &s);
        assert_eq!(mean[(0, 0)], 1.0);
        assert_eq!(q[(0, 0)], 1.0);
        let u1 = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let s1 = DMatrix::from_row_slice(1, 2, &[0.01, 0.02]);
        let (mean, q) = update_gaussian_prior(std::slice::from_ref(&u1), std::slice::from_ref(&s1));
        assert_eq!(mean, u1);
        assert_eq!(q, s1);
    }

    #[test]
    fn beta_prior_fixed_point_when_posteriors_agree() {
        let c = DMatrix::from_row_slice(2, 1, &[3.0, 7.5]);
        let d = DMatrix::from_row_slice(2, 1, &[4.0, 2.0]);
        let post = PosteriorParams::new(Family::Beta, c.clone(), d.clone()).unwrap();
        let prior = PriorParams::new(Family::Beta, c.clone(), d.clone()).unwrap();
        let next = update_beta_prior(&[post.clone(), post], &prior, &ApgConfig::default()).unwrap();
        for i in 0..2 {
            assert_relative_eq!(next.first[i], c[i], max_relative = 1e-9);
            assert_relative_eq!(next.second[i], d[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn rescaled_entry_keeps_mean_and_improves() {
        let (u, v) = (2.0, 6.0);
        let (c, d) = (40.0, 120.0);
        let w = 3.0;
        let obj = |a: f64, b: f64| -w * entry_var(Family::Beta, a, b) - entry_kl(Family::Beta, a, b, c, d);
        let (a, b) = rescale_entry(Family::Beta, u, v, c, d, w, BoxProjection::default());
        assert_relative_eq!(a / (a + b), u / (u + v), max_relative = 1e-12);
        assert!(obj(a, b) > obj(u, v));
        // stationary along the ray: nearby scalings are no better
        for f in [0.999, 1.001] {
            assert!(obj(a * f, b * f) <= obj(a, b) + 1e-12);
        }
    }

    #[test]
    fn rescale_respects_box() {
        let bx = BoxProjection { lower: 1e-6, upper: 10.0 };
        let (a, b) = rescale_entry(Family::Beta, 2.0, 6.0, 1e4, 3e4, 0.0, bx);
        assert!(a <= 10.0 && b <= 10.0 && a > 0.0);
        assert_relative_eq!(a / (a + b), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn successive_projection_finds_pure_pixels() {
        let e = DMatrix::from_row_slice(4, 3, &[0.9, 0.1, 0.2, 0.2, 0.8, 0.1, 0.1, 0.3, 0.7, 0.5, 0.4, 0.6]);
        let weights: [[f64; 3]; 9] = [
            [0.2, 0.3, 0.5],
            [1.0, 0.0, 0.0],
            [0.3, 0.3, 0.4],
            [0.5, 0.25, 0.25],
            [0.0, 1.0, 0.0],
            [0.1, 0.6, 0.3],
            [0.4, 0.4, 0.2],
            [0.0, 0.0, 1.0],
            [0.6, 0.2, 0.2],
        ];
        let values = DMatrix::from_fn(4, 9, |m, t| (0..3).map(|n| e[(m, n)] * weights[t][n]).sum());
        let cube = HsiCube::new(3, 3, values).unwrap();
        let mut picked = successive_projection(&cube, 3).unwrap();
        picked.sort();
        assert_eq!(picked, vec![1, 4, 7]);
    }

    #[test]
    fn user_endmembers_are_echoed() {
        let cube = small_cube(3, 0);
        let a = DMatrix::from_fn(12, 3, |m, n| 0.1 + 0.05 * m as f64 / 12.0 + 0.2 * n as f64);
        let mut cfg = small_config(Family::Beta);
        cfg.init = InitSpec { mode: InitMode::UserEndmembers, endmembers: Some(a.clone()) };
        let (_, state) = initialize(&cube, &cfg).unwrap();
        for q in &state.patch_posteriors {
            let mean = posterior_mean(q);
            assert!((mean - &a).amax() < 1e-12);
        }
        cfg.prior_family = Family::Gaussian;
        let (model, state) = initialize(&cube, &cfg).unwrap();
        assert_eq!(state.patch_posteriors[0].first, a);
        assert_eq!(model.prior.first, a);
        assert!(model.prior.second.iter().all(|&v| v == GAUSS_INIT_VAR));
    }

    #[test]
    fn random_simplex_init_is_seed_deterministic() {
        let cube = small_cube(4, 0);
        let mut cfg = small_config(Family::Beta);
        cfg.init.mode = InitMode::RandomSimplex;
        let a = initial_endmembers(&cube, &cfg).unwrap();
        assert_eq!(a, initial_endmembers(&cube, &cfg).unwrap());
        cfg.seed += 1;
        assert_ne!(a, initial_endmembers(&cube, &cfg).unwrap());
    }

    #[test]
    fn too_many_endmembers_for_distinct_pixels() {
        let cube = HsiCube::new(2, 2, DMatrix::from_element(3, 4, 0.5)).unwrap();
        let cfg = EngineConfig { n_endmembers: 2, patch_rows: 1, patch_cols: 1, ..Default::default() };
        assert!(matches!(initialize(&cube, &cfg), Err(HelenError::InvalidArgument(_))));
    }

    #[test]
    fn initial_state_matches_defaults() {
        let cube = small_cube(5, 0);
        let cfg = small_config(Family::Beta);
        let (model, state) = initialize(&cube, &cfg).unwrap();
        assert!(state.alpha.iter().all(|&a| a == 1.0));
        assert!(state.omega.iter().all(|&w| w == OMEGA_INIT));
        let q = &state.patch_posteriors[0];
        for (u, v) in q.first.iter().zip(q.second.iter()) {
            assert_relative_eq!(u + v, BETA_CONCENTRATION, max_relative = 1e-12);
        }
        let power = cube.values().iter().map(|v| v * v).sum::<f64>() / cube.values().len() as f64;
        assert_relative_eq!(model.noise_var, 1e-2 * power, max_relative = 1e-12);
    }

    #[test]
    fn each_update_is_an_ascent_step() {
        for family in [Family::Beta, Family::Gaussian, Family::Gamma] {
            let cube = small_cube(6, 2);
            let mut eng = Engine::new(&cube, small_config(family)).unwrap();
            let mut prev = eng.elbo().unwrap();
            for _ in 0..3 {
                let steps: [(&str, fn(&mut Engine) -> Result<()>); 6] = [
                    ("alpha", |e| e.update_alpha()),
                    ("posteriors", |e| e.update_patch_posteriors()),
                    ("omega", |e| {
                        e.update_omega_all();
                        Ok(())
                    }),
                    ("prior", |e| e.update_prior()),
                    ("noise", |e| {
                        e.update_noise();
                        Ok(())
                    }),
                    ("gamma", |e| {
                        e.update_outlier_rate();
                        Ok(())
                    }),
                ];
                for (name, step) in steps {
                    step(&mut eng).unwrap();
                    let next = eng.elbo().unwrap();
                    assert!(next >= prev - 1e-8 * prev.abs(), "{family:?} {name}: {prev} -> {next}");
                    prev = next;
                }
            }
        }
    }

    #[test]
    fn run_is_monotone_and_deterministic() {
        let cube = small_cube(7, 1);
        let cfg = small_config(Family::Beta);
        let a = run(&cube, &cfg).unwrap();
        for w in a.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
        }
        let b = run(&cube, &cfg).unwrap();
        assert_eq!(a, b);
        for col in a.abundances.column_iter() {
            assert_relative_eq!(col.sum(), 1.0, epsilon = 1e-12);
            assert!(col.iter().all(|&s| s > 0.0));
        }
        assert!(a.endmembers.iter().all(|e| e.iter().all(|&v| v > 0.0 && v < 1.0)));
    }

    #[test]
    fn all_outlier_cube_flags_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values = DMatrix::from_fn(12, 36, |_, _| rand::Rng::random_range(&mut rng, -6.0..6.0));
        let cube = HsiCube::new(6, 6, values).unwrap();
        let mut cfg = small_config(Family::Gaussian);
        cfg.patch_rows = 3;
        cfg.patch_cols = 3;
        let r = run(&cube, &cfg).unwrap();
        assert!(r.model.outlier_rate >= 0.9, "gamma = {}", r.model.outlier_rate);
    }

    #[test]
    fn progress_sink_sees_every_sweep() {
        let cube = small_cube(8, 0);
        let mut cfg = small_config(Family::Gaussian);
        cfg.max_sweeps = 4;
        cfg.rel_tol_mean_a = 0.0;
        let mut seen = Vec::new();
        let r = run_with_progress(&cube, &cfg, |rec| seen.push((rec.sweep, rec.elbo))).unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(seen.iter().map(|s| s.1).collect::<Vec<_>>(), r.elbo_trace);
        assert!(!r.converged);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<EngineConfig>(r#"{"prior_family":"beta","bogus":1}"#).is_err());
        let cfg: EngineConfig = serde_json::from_str(r#"{"rel_tol_mean_A":1e-3}"#).unwrap();
        assert_eq!(cfg.rel_tol_mean_a, 1e-3);
    }
}

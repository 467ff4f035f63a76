//! Numerical reference computations that share no code with the closed
//! forms they check: Monte-Carlo with library samplers and densities,
//! tanh-sinh quadrature, Richardson-extrapolated central differences and
//! golden-section search. Used by `helen selftest` and the test suites.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Continuous, Gamma, LogNormal, Normal};

use crate::dirichlet::DirichletParams;
use crate::elbo::{mixing_term, patch_elbo, patch_suff_stats, pixel_elbo, total_elbo, PatchObjective};
use crate::engine::{update_gamma, update_gaussian_prior, update_gaussian_sigma, update_noise_var, update_omega, update_prior_by_gradient};
use crate::apg::ApgConfig;
use crate::model::{log_outlier_density, partition_image, HsiCube, ModelParameters, OutlierDensity, VariationalState};
use crate::priors::{kl_gradients, kl_to_prior, posterior_correlation, posterior_mean, Family, PosteriorParams, PriorParams};

/// ∫_a^b f by tanh-sinh quadrature, refining until two levels agree to
/// `1e-13` relative. Endpoint singularities are fine; points where `f` is
/// not finite contribute nothing.
pub fn tanh_sinh<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let eval = |t: f64| -> f64 {
        let u = std::f64::consts::FRAC_PI_2 * t.sinh();
        let e = (-2.0 * u.abs()).exp();
        // distance from the nearest endpoint in units of `half`
        let gap = 2.0 * e / (1.0 + e);
        let w = std::f64::consts::FRAC_PI_2 * t.cosh() * 4.0 * e / ((1.0 + e) * (1.0 + e));
        if gap == 0.0 || w == 0.0 {
            return 0.0;
        }
        let x = if t >= 0.0 { b - half * gap } else { a + half * gap };
        let v = f(x);
        if v.is_finite() {
            w * v
        } else {
            0.0
        }
    };
    let t_max = 4.0;
    let mut h = 0.5;
    let mut sum = eval(0.0);
    let mut t = h;
    while t <= t_max {
        sum += eval(t) + eval(-t);
        t += h;
    }
    let mut estimate = half * h * sum;
    for _ in 0..10 {
        h *= 0.5;
        let mut t = h;
        while t <= t_max {
            sum += eval(t) + eval(-t);
            t += 2.0 * h;
        }
        let next = half * h * sum;
        if (next - estimate).abs() <= 1e-13 * next.abs().max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Library density of one entry. `Uniform` is Beta(1, 1).
pub fn ln_pdf(family: Family, a: f64, b: f64, x: f64) -> f64 {
    match family {
        Family::Beta => Beta::new(a, b).unwrap().ln_pdf(x),
        Family::Uniform => Beta::new(1.0, 1.0).unwrap().ln_pdf(x),
        Family::Gaussian => Normal::new(a, b.sqrt()).unwrap().ln_pdf(x),
        Family::Lognormal => LogNormal::new(a, b.sqrt()).unwrap().ln_pdf(x),
        Family::Gamma => Gamma::new(a, b).unwrap().ln_pdf(x),
    }
}

/// Sub-intervals covering the effective support of one entry's density.
fn support_pieces(family: Family, a: f64, b: f64) -> Vec<(f64, f64)> {
    match family {
        Family::Beta | Family::Uniform => {
            let m = if family == Family::Uniform { 0.5 } else { a / (a + b) };
            vec![(0.0, m), (m, 1.0)]
        }
        Family::Gaussian => {
            let sd = b.sqrt();
            vec![(a - 40.0 * sd, a), (a, a + 40.0 * sd)]
        }
        Family::Lognormal => {
            let sd = b.sqrt();
            let m = a.exp();
            vec![(0.0, m), (m, (a + 40.0 * sd).exp())]
        }
        Family::Gamma => {
            let m = a / b;
            let sd = a.sqrt() / b;
            vec![(0.0, m), (m, m + 60.0 * sd + 60.0 / b)]
        }
    }
}

/// E[g(x)] under one entry's density by quadrature.
pub fn expect<G: Fn(f64) -> f64>(family: Family, a: f64, b: f64, g: G) -> f64 {
    support_pieces(family, a, b)
        .into_iter()
        .map(|(lo, hi)| {
            tanh_sinh(
                |x| {
                    let lp = ln_pdf(family, a, b, x);
                    if lp < -745.0 {
                        0.0
                    } else {
                        lp.exp() * g(x)
                    }
                },
                lo,
                hi,
            )
        })
        .sum()
}

/// (mean, variance) of one entry by quadrature.
pub fn quad_moments(family: Family, a: f64, b: f64) -> (f64, f64) {
    let mean = expect(family, a, b, |x| x);
    let var = expect(family, a, b, |x| (x - mean) * (x - mean));
    (mean, var)
}

/// KL(q ‖ p) for one entry by quadrature. `prior` is the prior family;
/// the posterior uses its matched family.
pub fn quad_kl(prior: Family, u: f64, v: f64, c: f64, d: f64) -> f64 {
    let q = prior.posterior_family();
    expect(q, u, v, |x| ln_pdf(q, u, v, x) - ln_pdf(prior, c, d, x))
}

pub fn sample(family: Family, a: f64, b: f64, rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    match family {
        Family::Beta => rand_distr::Beta::new(a, b).unwrap().sample(rng),
        Family::Uniform => rng.random::<f64>(),
        Family::Gaussian => rand_distr::Normal::new(a, b.sqrt()).unwrap().sample(rng),
        Family::Lognormal => rand_distr::LogNormal::new(a, b.sqrt()).unwrap().sample(rng),
        Family::Gamma => rand_distr::Gamma::new(a, 1.0 / b).unwrap().sample(rng),
    }
}

/// Running mean and standard error of the mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct McStat {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl McStat {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    pub fn std_err(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        ((self.sum_sq / n - m * m).max(0.0) / (n - 1.0)).sqrt()
    }

    /// |value − mean| in standard errors.
    pub fn z(&self, value: f64) -> f64 {
        let se = self.std_err();
        let diff = (value - self.mean()).abs();
        if se == 0.0 {
            if diff <= 1e-12 * value.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

/// Monte-Carlo estimates for a random `M x N` matrix with independent
/// entries: entrywise mean, E[AᵀA] and KL(q ‖ p).
pub struct MatrixMc {
    pub mean: Vec<McStat>,
    pub corr: Vec<McStat>,
    pub kl: McStat,
}

pub fn matrix_mc(q: &PosteriorParams, p: &PriorParams, samples: usize, rng: &mut ChaCha8Rng) -> MatrixMc {
    let (m, n) = q.shape();
    let mut out = MatrixMc { mean: vec![McStat::default(); m * n], corr: vec![McStat::default(); n * n], kl: McStat::default() };
    let mut a = DMatrix::zeros(m, n);
    for _ in 0..samples {
        let mut kl = 0.0;
        for i in 0..m * n {
            let x = sample(q.family, q.first[i], q.second[i], rng);
            a[i] = x;
            out.mean[i].push(x);
            kl += ln_pdf(q.family, q.first[i], q.second[i], x) - ln_pdf(p.family, p.first[i], p.second[i], x);
        }
        out.kl.push(kl);
        let ata = a.tr_mul(&a);
        for (s, v) in out.corr.iter_mut().zip(ata.iter()) {
            s.push(*v);
        }
    }
    out
}

/// Central difference with one Richardson step (error O(h⁴)).
pub fn derivative<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    let mut d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let d1 = d(h);
    let d2 = d(0.5 * h);
    (4.0 * d2 - d1) / 3.0
}

/// Gradient of `f` at `x` by [`derivative`] per coordinate, with steps
/// relative to each coordinate's magnitude.
pub fn gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1e-3);
            let g = derivative(
                |v| {
                    buf[i] = v;
                    f(&buf)
                },
                x[i],
                h,
            );
            buf[i] = x[i];
            g
        })
        .collect()
}

/// ‖a − b‖ / max(‖b‖, floor).
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(floor)
}

/// Maximizer of a unimodal `f` on [lo, hi] by golden-section search.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
        if hi - lo <= 1e-15 * (lo.abs() + hi.abs()) {
            break;
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Outcome of one oracle comparison suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed discrepancy, in the suite's own unit.
    pub worst: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, worst: f64, limit: f64, detail: String) -> Self {
        Self { name: name.into(), passed: worst <= limit, worst, detail }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A random parameter pair for one entry of `family`.
pub fn random_params(family: Family, rng: &mut ChaCha8Rng) -> (f64, f64) {
    match family {
        Family::Beta | Family::Uniform => (log_uniform(rng, 0.5, 40.0), log_uniform(rng, 0.5, 40.0)),
        Family::Gaussian => (uniform(rng, 0.05, 1.0), log_uniform(rng, 1e-4, 0.1)),
        Family::Lognormal => (uniform(rng, -2.0, 0.0), log_uniform(rng, 0.01, 0.5)),
        Family::Gamma => (log_uniform(rng, 0.5, 40.0), log_uniform(rng, 1.0, 80.0)),
    }
}

/// A random posterior/prior pair of shape `m x n` for `prior_family`.
pub fn random_pair(prior_family: Family, m: usize, n: usize, rng: &mut ChaCha8Rng) -> (PosteriorParams, PriorParams) {
    let qf = prior_family.posterior_family();
    let mut qa = DMatrix::zeros(m, n);
    let mut qb = DMatrix::zeros(m, n);
    let mut pa = DMatrix::zeros(m, n);
    let mut pb = DMatrix::zeros(m, n);
    for i in 0..m * n {
        (qa[i], qb[i]) = random_params(qf, rng);
        (pa[i], pb[i]) = random_params(qf, rng);
    }
    let p = if prior_family == Family::Uniform { PriorParams::uniform(m, n) } else { PriorParams::new(prior_family, pa, pb).unwrap() };
    (PosteriorParams::new(qf, qa, qb).unwrap(), p)
}

/// Per-comparison |z| limit that keeps the chance of any false exceedance
/// among `comparisons` at the two-sided 3σ level.
pub fn family_wise_z_limit(comparisons: usize) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let level = 2.0 * (1.0 - Normal::standard().cdf(3.0));
    Normal::standard().inverse_cdf(1.0 - level / (2.0 * comparisons.max(1) as f64))
}

/// Comparisons made per family by [`check_distributions`].
pub const DISTRIBUTION_COMPARISONS_PER_INSTANCE: usize = 8;

/// Analytic moments and KL against Monte-Carlo (|z| ≤ `z_limit` for every
/// comparison) and against quadrature (relative error ≤ 1e-6), over
/// `instances` random 2x2 parameterizations per family.
pub fn check_distributions(instances: usize, samples: usize, seed: u64, z_limit: f64) -> Vec<Check> {
    use rayon::prelude::*;
    Family::ALL.par_iter().flat_map_iter(|&family| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((family as u64 + 1) * 0x9E37_79B9));
        let mut worst_z = 0.0f64;
        let mut worst_q = 0.0f64;
        let mut exceed = 0usize;
        let mut total = 0usize;
        for _ in 0..instances {
            let (q, p) = random_pair(family, 2, 2, &mut rng);
            let mean = posterior_mean(&q);
            let corr = posterior_correlation(&q);
            let kl = kl_to_prior(&q, &p).unwrap();
            let mc = matrix_mc(&q, &p, samples, &mut rng);
            // E[AᵀA] is symmetric: compare the upper triangle only
            let upper = (0..2).flat_map(|j| (0..=j).map(move |i| i + 2 * j));
            let zs = mean
                .iter()
                .zip(&mc.mean)
                .map(|(v, s)| s.z(*v))
                .chain(upper.map(|i| mc.corr[i].z(corr[i])))
                .chain([mc.kl.z(kl)]);
            for z in zs {
                total += 1;
                if z > z_limit {
                    exceed += 1;
                }
                worst_z = worst_z.max(z);
            }

            let mut quad_kl_sum = 0.0;
            let mut var = DMatrix::zeros(2, 2);
            for i in 0..4 {
                let (qm, qv) = quad_moments(q.family, q.first[i], q.second[i]);
                var[i] = qv;
                worst_q = worst_q.max((qm - mean[i]).abs() / mean[i].abs().max(1.0));
                quad_kl_sum += quad_kl(family, q.first[i], q.second[i], p.first[i], p.second[i]);
            }
            let m_quad = DMatrix::from_fn(2, 2, |r, c| expect(q.family, q.first[(r, c)], q.second[(r, c)], |x| x));
            let corr_quad = m_quad.tr_mul(&m_quad) + DMatrix::from_diagonal(&var.row_sum().transpose());
            for (a, b) in corr.iter().zip(corr_quad.iter()) {
                worst_q = worst_q.max((a - b).abs() / b.abs().max(1.0));
            }
            worst_q = worst_q.max((kl - quad_kl_sum).abs() / quad_kl_sum.abs().max(1.0));
        }
        let name = format!("distribution {}", family.name());
        let mc_check = Check::new(
            &format!("{name}: Monte-Carlo"),
            worst_z,
            z_limit,
            format!("{exceed}/{total} comparisons beyond {z_limit:.2} SE, max |z| = {worst_z:.3}"),
        );
        let quad = Check::new(&format!("{name}: quadrature"), worst_q, 1e-6, format!("max relative error {worst_q:.3e}"));
        [mc_check, quad]
    })
    .collect()
}

/// Analytic gradients against finite differences (norm-wise relative error).
pub fn check_gradients(instances: usize, seed: u64) -> Vec<Check> {
    let (m, n) = (8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_kl = 0.0f64;
    let mut worst_alpha = 0.0f64;
    let mut worst_ell = 0.0f64;
    for i in 0..instances {
        let family = [Family::Beta, Family::Gaussian, Family::Lognormal, Family::Gamma, Family::Uniform][i % 5];
        let (q, p) = random_pair(family, m, n, &mut rng);

        let g = kl_gradients(&q, &p).unwrap();
        let kl_at = |q1: &[f64], q2: &[f64], p1: &[f64], p2: &[f64]| {
            let q = PosteriorParams { family: q.family, first: DMatrix::from_column_slice(m, n, q1), second: DMatrix::from_column_slice(m, n, q2) };
            let p = PriorParams { family: p.family, first: DMatrix::from_column_slice(m, n, p1), second: DMatrix::from_column_slice(m, n, p2) };
            kl_to_prior(&q, &p).unwrap()
        };
        let (q1, q2, p1, p2) = (q.first.as_slice(), q.second.as_slice(), p.first.as_slice(), p.second.as_slice());
        let fd = [
            gradient(|x| kl_at(x, q2, p1, p2), q1, 1e-4),
            gradient(|x| kl_at(q1, x, p1, p2), q2, 1e-4),
            gradient(|x| kl_at(q1, q2, x, p2), p1, 1e-4),
            gradient(|x| kl_at(q1, q2, p1, x), p2, 1e-4),
        ];
        let an = [&g.posterior_first, &g.posterior_second, &g.prior_first, &g.prior_second];
        for (a, f) in an.iter().zip(&fd) {
            if family == Family::Uniform && f.iter().all(|v| *v == 0.0) && a.iter().all(|v| *v == 0.0) {
                continue;
            }
            worst_kl = worst_kl.max(rel_err(a.as_slice(), f, 1e-8));
        }

        // ℓ_{t,k} w.r.t. α_t and the posterior parameters
        let y: Vec<f64> = (0..m).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| log_uniform(&mut rng, 0.3, 30.0)).collect();
        let noise = log_uniform(&mut rng, 1e-3, 0.1);
        let moments = crate::elbo::PatchMoments::of(&q);
        let obj = crate::elbo::AlphaObjective::new(&y, &moments, noise);
        let (_, ga) = obj.value_and_grad(&alpha);
        let fa = gradient(|a| pixel_elbo(&y, noise, &q, &DirichletParams::from_slice(a).unwrap()).unwrap(), &alpha, 1e-4);
        worst_alpha = worst_alpha.max(rel_err(&ga, &fa, 1e-8));

        let qs = DirichletParams::from_slice(&alpha).unwrap();
        let stats = patch_suff_stats(&[&y], std::slice::from_ref(&qs), &[0.0]).unwrap();
        let eval = PatchObjective::new(&stats, noise, &p).evaluate(&q.first, &q.second);
        // patch objective = ℓ − KL + const, so ∇ℓ = ∇objective + ∇KL
        let ell_first: Vec<f64> = eval.grad_first.iter().zip(g.posterior_first.iter()).map(|(a, b)| a + b).collect();
        let ell_second: Vec<f64> = eval.grad_second.iter().zip(g.posterior_second.iter()).map(|(a, b)| a + b).collect();
        let ell_at = |f1: &[f64], f2: &[f64]| {
            let qq = PosteriorParams { family: q.family, first: DMatrix::from_column_slice(m, n, f1), second: DMatrix::from_column_slice(m, n, f2) };
            pixel_elbo(&y, noise, &qq, &qs).unwrap()
        };
        let f1 = gradient(|x| ell_at(x, q2), q1, 1e-4);
        let f2 = gradient(|x| ell_at(q1, x), q2, 1e-4);
        worst_ell = worst_ell.max(rel_err(&ell_first, &f1, 1e-8));
        if f2.iter().any(|v| *v != 0.0) {
            worst_ell = worst_ell.max(rel_err(&ell_second, &f2, 1e-8));
        }
    }
    vec![
        Check::new("gradient KL", worst_kl, 1e-5, format!("max relative error {worst_kl:.3e}")),
        Check::new("gradient alpha", worst_alpha, 1e-5, format!("max relative error {worst_alpha:.3e}")),
        Check::new("gradient posterior", worst_ell, 1e-5, format!("max relative error {worst_ell:.3e}")),
    ]
}

/// Relative shortfall of the closed form against the 1-D search:
/// (f(search) − f(closed)) / |f(closed)|, floored at zero.
fn shortfall(closed: f64, searched: f64) -> f64 {
    ((searched - closed) / closed.abs().max(1e-300)).max(0.0)
}

/// Closed-form updates against golden-section search on their objectives.
/// The reported figure is the worst relative objective gap, where a
/// positive gap means the search found a better value.
pub fn check_closed_forms(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let (m, n) = (6, 3);
    for _ in 0..instances {
        // ω: maximize ω̄ ℓ + g(ω)
        let gamma = uniform(&mut rng, 0.01, 0.99);
        let lp = uniform(&mut rng, -30.0, 5.0);
        let ell = lp + uniform(&mut rng, -8.0, 8.0);
        let f = |w: f64| (1.0 - w) * ell + mixing_term(w, gamma, lp);
        let w = update_omega(lp, gamma, ell);
        let (_, fs) = golden_max(f, 0.0, 1.0, 200);
        worst[0] = worst[0].max(shortfall(f(w), fs));

        // σ², γ and Σ on a small random patch
        let (q, p) = random_pair(Family::Gaussian, m, n, &mut rng);
        let t = 12;
        let ys: Vec<Vec<f64>> = (0..t).map(|_| (0..m).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).collect();
        let alphas: Vec<DirichletParams> =
            (0..t).map(|_| DirichletParams::from_slice(&(0..n).map(|_| log_uniform(&mut rng, 0.5, 20.0)).collect::<Vec<_>>()).unwrap()).collect();
        let omega: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let fsig = |s2: f64| -> f64 {
            ys.iter().zip(&alphas).zip(&omega).map(|((y, a), w)| (1.0 - w) * pixel_elbo(y, s2, &q, a).unwrap()).sum()
        };
        let eps: Vec<f64> = ys
            .iter()
            .zip(&alphas)
            .zip(&omega)
            .map(|((y, a), w)| (1.0 - w) * crate::elbo::pixel_suff_stats(y, &q, a).unwrap().expected_residual())
            .collect();
        let wsum: f64 = omega.iter().map(|w| 1.0 - w).sum();
        let s2 = update_noise_var(&eps, wsum, m, 1.0).value;
        let (_, fs) = golden_max(|l| fsig(l.exp()), (s2 * 1e-3).ln(), (s2 * 1e3).ln(), 300);
        worst[1] = worst[1].max(shortfall(fsig(s2), fs));

        let fg = |g: f64| -> f64 { omega.iter().map(|&w| mixing_term(w, g, lp)).sum() };
        let g = update_gamma(&omega);
        let (_, fs) = golden_max(fg, 1e-12, 1.0 - 1e-12, 300);
        worst[2] = worst[2].max(shortfall(fg(g), fs));

        let refs: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
        let stats = patch_suff_stats(&refs, &alphas, &omega).unwrap();
        let obj = PatchObjective::new(&stats, s2, &p);
        let sigma = update_gaussian_sigma(&p.second, &stats.r_s, s2);
        for i in 0..m * n {
            let f = |v: f64| {
                let mut s = sigma.clone();
                s[i] = v;
                obj.evaluate(&q.first, &s).value
            };
            let (_, fs) = golden_max(|l| f(l.exp()), (sigma[i] * 1e-3).ln(), (sigma[i] * 1e3).ln(), 300);
            worst[3] = worst[3].max(shortfall(f(sigma[i]), fs));
        }

        // Ā, Q: −Σ_k KL over a few random posteriors, per coordinate
        let posts: Vec<PosteriorParams> = (0..4).map(|_| random_pair(Family::Gaussian, m, n, &mut rng).0).collect();
        let us: Vec<DMatrix<f64>> = posts.iter().map(|q| q.first.clone()).collect();
        let ss: Vec<DMatrix<f64>> = posts.iter().map(|q| q.second.clone()).collect();
        let (abar, qvar) = update_gaussian_prior(&us, &ss);
        let neg_kl = |pa: &DMatrix<f64>, pq: &DMatrix<f64>| -> f64 {
            let pr = PriorParams { family: Family::Gaussian, first: pa.clone(), second: pq.clone() };
            -posts.iter().map(|q| kl_to_prior(q, &pr).unwrap()).sum::<f64>()
        };
        let at = neg_kl(&abar, &qvar);
        for i in 0..m * n {
            let spread = 10.0 * qvar[i].sqrt() + 1.0;
            let (_, fa) = golden_max(
                |v| {
                    let mut a = abar.clone();
                    a[i] = v;
                    neg_kl(&a, &qvar)
                },
                abar[i] - spread,
                abar[i] + spread,
                300,
            );
            let (_, fq) = golden_max(
                |l| {
                    let mut q2 = qvar.clone();
                    q2[i] = l.exp();
                    neg_kl(&abar, &q2)
                },
                (qvar[i] * 1e-3).ln(),
                (qvar[i] * 1e3).ln(),
                300,
            );
            worst[4] = worst[4].max(shortfall(at, fa)).max(shortfall(at, fq));
        }
    }
    let names = ["closed form omega", "closed form noise variance", "closed form outlier rate", "closed form gaussian Sigma", "closed form gaussian prior"];
    names.iter().zip(worst).map(|(nm, w)| Check::new(nm, w, 1e-8, format!("worst relative objective gap {w:.3e}"))).collect()
}

/// The iterative prior update never lowers −Σ KL and lands on a stationary
/// point (finite-difference gradient small relative to the start).
pub fn check_prior_ascent(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_drop = 0.0f64;
    for _ in 0..instances {
        let family = [Family::Beta, Family::Gamma, Family::Lognormal][rng.random_range(0..3)];
        let posts: Vec<PosteriorParams> = (0..5).map(|_| random_pair(family, 3, 2, &mut rng).0).collect();
        let (_, prior) = random_pair(family, 3, 2, &mut rng);
        let obj = |p: &PriorParams| -posts.iter().map(|q| kl_to_prior(q, p).unwrap()).sum::<f64>();
        let cfg = ApgConfig { max_iters: 50, ..ApgConfig::default() };
        let mut steps = vec![1.0; 6];
        let next = update_prior_by_gradient(&posts, &prior, &cfg, &mut steps).unwrap();
        let (a, b) = (obj(&prior), obj(&next));
        worst_drop = worst_drop.max((a - b) / a.abs().max(1.0));
    }
    Check::new("prior ascent", worst_drop, 1e-12, format!("worst relative decrease {worst_drop:.3e}"))
}

/// Nested Monte-Carlo estimate of Σ_k log p_θ(Y_k) for a one-patch image
/// with two endmembers: outer sampling of A from the prior, inner
/// quadrature over the abundance simplex. Returns (estimate, std error).
pub fn log_marginal_two_endmembers(cube: &HsiCube, model: &ModelParameters, samples: usize, seed: u64) -> (f64, f64) {
    assert_eq!(model.prior.shape().1, 2, "two endmembers only");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, _) = model.prior.shape();
    let t_total = cube.n_pixels();
    let log_pout: Vec<f64> = (0..t_total).map(|t| log_outlier_density(cube.pixel(t), &model.outlier_density)).collect();
    let s2 = model.noise_var;
    let gamma = model.outlier_rate;
    let prior_family = model.prior.family;
    let draw_family = if prior_family == Family::Uniform { Family::Uniform } else { prior_family };
    let mut logs = Vec::with_capacity(samples);
    let mut a = DMatrix::zeros(m, 2);
    for _ in 0..samples {
        for i in 0..2 * m {
            a[i] = sample(draw_family, model.prior.first[i], model.prior.second[i], &mut rng);
        }
        let mut total = 0.0;
        for t in 0..t_total {
            let y = cube.pixel(t);
            let lik = |w: f64| -> f64 {
                let r2: f64 = (0..m).map(|b| (y[b] - a[(b, 0)] * w - a[(b, 1)] * (1.0 - w)).powi(2)).sum();
                (-0.5 * r2 / s2 - 0.5 * m as f64 * (2.0 * std::f64::consts::PI * s2).ln()).exp()
            };
            // Dir(1) over two endmembers is uniform on [0, 1]
            let inlier = tanh_sinh(lik, 0.0, 1.0);
            total += ((1.0 - gamma) * inlier + gamma * log_pout[t].exp()).ln();
        }
        logs.push(total);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let mean_w = w.iter().sum::<f64>() / samples as f64;
    let var_w = w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (samples as f64 - 1.0);
    let se_log = (var_w / samples as f64).sqrt() / mean_w;
    (max + mean_w.ln(), se_log)
}

/// ELBO ≤ log-marginal estimate + 3 SE on a tiny random instance.
pub fn check_lower_bound(family: Family, samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, rows, cols) = (2, 2, 2, 2);
    let (q, p) = random_pair(family, m, n, &mut rng);
    let values = DMatrix::from_fn(m, rows * cols, |_, _| uniform(&mut rng, 0.1, 0.9));
    let cube = HsiCube::new(rows, cols, values).unwrap();
    let grid = partition_image(rows, cols, rows, cols).unwrap();
    let model = ModelParameters { prior: p, noise_var: log_uniform(&mut rng, 0.005, 0.05), outlier_rate: 0.1, outlier_density: OutlierDensity::default() };
    let state = VariationalState {
        alpha: DMatrix::from_fn(n, rows * cols, |_, _| log_uniform(&mut rng, 0.5, 5.0)),
        omega: (0..rows * cols).map(|_| uniform(&mut rng, 0.0, 0.3)).collect(),
        patch_posteriors: vec![q],
    };
    let elbo = total_elbo(&cube, &grid, &model, &state).unwrap();
    let (lm, se) = log_marginal_two_endmembers(&cube, &model, samples, seed.wrapping_add(1));
    let margin = elbo - (lm + 3.0 * se);
    Check {
        name: format!("lower bound {}", family.name()),
        passed: margin <= 0.0,
        worst: margin,
        detail: format!("elbo {elbo:.6} vs log p {lm:.6} +- {se:.2e}"),
    }
}

/// Consistency between the patch ELBO and its pieces on random patches.
fn check_patch_assembly(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (5, 3);
    let (q, p) = random_pair(Family::Beta, m, n, &mut rng);
    let ys: Vec<Vec<f64>> = (0..4).map(|_| (0..m).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).collect();
    let refs: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
    let qs: Vec<DirichletParams> = (0..4).map(|_| DirichletParams::from_slice(&[1.0, 2.0, 3.0]).unwrap()).collect();
    let omega = vec![0.0; 4];
    let d = OutlierDensity::default();
    let whole = patch_elbo(&refs, 0.02, 1e-6, &q, &p, &qs, &omega, &d).unwrap();
    let parts: f64 = refs.iter().zip(&qs).map(|(y, a)| pixel_elbo(y, 0.02, &q, a).unwrap() + mixing_term(0.0, 1e-6, 0.0)).sum::<f64>()
        - kl_to_prior(&q, &p).unwrap();
    let err = (whole - parts).abs() / whole.abs();
    Check::new("patch assembly", err, 1e-12, format!("relative mismatch {err:.3e}"))
}

/// All oracle suites. `quick` trims sample counts for an interactive run.
pub fn selftest(quick: bool) -> Vec<Check> {
    let (inst, samples) = if quick { (3, 20_000) } else { (20, 1_000_000) };
    let comparisons = inst * DISTRIBUTION_COMPARISONS_PER_INSTANCE * Family::ALL.len();
    let mut out = check_distributions(inst, samples, 7, family_wise_z_limit(comparisons));
    out.extend(check_gradients(if quick { 5 } else { 20 }, 11));
    out.extend(check_closed_forms(if quick { 5 } else { 20 }, 13));
    out.push(check_prior_ascent(if quick { 5 } else { 20 }, 17));
    out.push(check_patch_assembly(19));
    for f in [Family::Beta, Family::Gaussian] {
        out.push(check_lower_bound(f, if quick { 20_000 } else { 200_000 }, 23));
    }
    out
}

//! Synthetic cubes with block-wise endmember variability, spatial blur,
//! purity-limited abundances, Gaussian noise and uniform outliers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HelenError, Result};
use crate::io::opt_matrix_rows;
use crate::model::{partition_image, HsiCube};

const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub n_endmembers: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    pub max_purity: f64,
    pub n_outliers: usize,
    pub outlier_range: (f64, f64),
    pub blur_kernel_size: usize,
    pub blur_sigma: f64,
    pub ev_scale_range: (f64, f64),
    pub ev_perturb_std: f64,
    pub seed: u64,
    #[serde(with = "opt_matrix_rows", skip_serializing_if = "Option::is_none")]
    pub base_endmembers: Option<DMatrix<f64>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 40,
            cols: 40,
            bands: 50,
            n_endmembers: 3,
            patch_rows: 5,
            patch_cols: 5,
            snr_db: Some(25.0),
            max_purity: 0.7,
            n_outliers: 0,
            outlier_range: (0.0, 2.0),
            blur_kernel_size: 11,
            blur_sigma: 1.0,
            ev_scale_range: (0.8, 1.2),
            ev_perturb_std: 0.01,
            seed: 0,
            base_endmembers: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HelenError::Config(m.into()));
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return bad("synth dimensions must be positive");
        }
        if self.n_endmembers < 2 {
            return bad("synth needs at least two endmembers");
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return bad("synth patch size must be positive");
        }
        if !(self.max_purity > 0.0 && self.max_purity <= 1.0) {
            return bad("max_purity must lie in (0, 1]");
        }
        if self.max_purity * (self.n_endmembers as f64) < 1.0 {
            return bad("max_purity * n_endmembers < 1 leaves no feasible abundances");
        }
        if self.n_outliers > self.rows * self.cols {
            return bad("more outliers than pixels");
        }
        if !(self.outlier_range.0 <= self.outlier_range.1) || !self.outlier_range.0.is_finite() || !self.outlier_range.1.is_finite() {
            return bad("outlier_range must be an ordered finite pair");
        }
        if self.blur_kernel_size % 2 == 0 {
            return bad("blur_kernel_size must be odd");
        }
        if !(self.blur_sigma > 0.0) {
            return bad("blur_sigma must be positive");
        }
        if !(self.ev_scale_range.0 <= self.ev_scale_range.1 && self.ev_scale_range.0 > 0.0) {
            return bad("ev_scale_range must be an ordered positive pair");
        }
        if !(self.ev_perturb_std >= 0.0) {
            return bad("ev_perturb_std must be non-negative");
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return bad("snr_db is NaN");
            }
        }
        if let Some(a) = &self.base_endmembers {
            if a.shape() != (self.bands, self.n_endmembers) {
                return bad("base_endmembers must be bands x n_endmembers");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthGroundTruth {
    pub cube: HsiCube,
    /// Noise-free, outlier-free base spectra (`M x N`).
    pub base_endmembers: DMatrix<f64>,
    pub per_pixel_endmembers: Vec<DMatrix<f64>>,
    /// `N x T`.
    pub abundances: DMatrix<f64>,
    pub outlier_mask: Vec<bool>,
    pub noise_var: f64,
}

/// Normalized 1-D Gaussian kernel of odd length.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let j = i.rem_euclid(period);
    if j < n as isize {
        j as usize
    } else {
        (period - 1 - j) as usize
    }
}

fn convolve_axis(src: &DMatrix<f64>, kernel: &[f64], along_rows: bool) -> DMatrix<f64> {
    let (h, w) = src.shape();
    let r = (kernel.len() / 2) as isize;
    DMatrix::from_fn(h, w, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(q, kv)| {
                let off = q as isize - r;
                if along_rows {
                    kv * src[(reflect(i as isize + off, h), j)]
                } else {
                    kv * src[(i, reflect(j as isize + off, w))]
                }
            })
            .sum()
    })
}

/// Separable Gaussian blur of a `rows x cols` plane with reflect padding.
pub fn gaussian_blur_2d(field: &DMatrix<f64>, kernel_size: usize, sigma: f64) -> Result<DMatrix<f64>> {
    if kernel_size % 2 == 0 {
        return Err(HelenError::invalid("blur kernel size must be odd"));
    }
    if !(sigma > 0.0) {
        return Err(HelenError::invalid("blur sigma must be positive"));
    }
    let k = gaussian_kernel(kernel_size, sigma);
    let tmp = convolve_axis(field, &k, true);
    Ok(convolve_axis(&tmp, &k, false))
}

fn bump_spectra(bands: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(bands, n);
    let mf = bands as f64;
    for j in 0..n {
        let n_bumps = rng.random_range(3..=6);
        let mut col = vec![0.1; bands];
        for _ in 0..n_bumps {
            let centre = rng.random::<f64>() * mf;
            let width = 1.0 + mf * (0.05 + 0.2 * rng.random::<f64>());
            let amp = 0.2 + 0.8 * rng.random::<f64>();
            for (m, v) in col.iter_mut().enumerate() {
                *v += amp * (-(m as f64 - centre).powi(2) / (2.0 * width * width)).exp();
            }
        }
        let peak = col.iter().cloned().fold(0.0, f64::max);
        let top = 0.6 + 0.35 * rng.random::<f64>();
        for (m, v) in col.iter().enumerate() {
            a[(m, j)] = (v / peak * top).clamp(0.05, 0.95);
        }
    }
    a
}

/// Zero-mean perturbation, smooth along bands, with sample std `std`.
fn smooth_perturbation(bands: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..bands).map(|_| rng.sample(StandardNormal)).collect();
    if std == 0.0 {
        return vec![0.0; bands];
    }
    let k = gaussian_kernel(2 * 3 * 2 + 1, 2.0);
    let r = (k.len() / 2) as isize;
    let mut smooth: Vec<f64> = (0..bands)
        .map(|m| k.iter().enumerate().map(|(q, kv)| kv * white[reflect(m as isize + q as isize - r, bands)]).sum())
        .collect();
    let mean = smooth.iter().sum::<f64>() / bands as f64;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bands as f64).sqrt();
    let scale = if sd > 0.0 { std / sd } else { 0.0 };
    smooth.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    smooth
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a Dir(1) vector with all entries at most `max_purity`.
fn purity_limited_dirichlet(n: usize, max_purity: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_REJECTIONS {
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = e.iter().sum();
        let v: Vec<f64> = e.iter().map(|x| x / s).collect();
        if v.iter().all(|&x| x <= max_purity) {
            return Ok(v);
        }
    }
    Err(HelenError::Config(format!("abundance rejection sampling failed {MAX_REJECTIONS} times in a row")))
}

/// Generates a cube together with its ground truth. Deterministic in
/// `cfg.seed`; all draws come from one sequential stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthGroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, n) = (cfg.bands, cfg.n_endmembers);
    let (rows, cols) = (cfg.rows, cfg.cols);
    let t_total = rows * cols;

    let base = match &cfg.base_endmembers {
        Some(a) => a.clone(),
        None => bump_spectra(m, n, &mut rng),
    };

    let grid = partition_image(rows, cols, cfg.patch_rows.min(rows), cfg.patch_cols.min(cols))?;
    let blocks: Vec<DMatrix<f64>> = (0..grid.n_patches())
        .map(|_| {
            let mut a = base.clone();
            for j in 0..n {
                let c = uniform(&mut rng, cfg.ev_scale_range.0, cfg.ev_scale_range.1);
                let e = smooth_perturbation(m, cfg.ev_perturb_std, &mut rng);
                for b in 0..m {
                    a[(b, j)] = (a[(b, j)] * c + e[b]).clamp(0.001, 0.999);
                }
            }
            a
        })
        .collect();

    let mut per_pixel = vec![DMatrix::zeros(m, n); t_total];
    let needs_blur = grid.n_patches() > 1;
    for b in 0..m {
        for j in 0..n {
            let plane = DMatrix::from_fn(rows, cols, |r, c| blocks[grid.assignment[r * cols + c]][(b, j)]);
            let plane = if needs_blur { gaussian_blur_2d(&plane, cfg.blur_kernel_size, cfg.blur_sigma)? } else { plane };
            for r in 0..rows {
                for c in 0..cols {
                    per_pixel[r * cols + c][(b, j)] = plane[(r, c)];
                }
            }
        }
    }

    let mut abundances = DMatrix::zeros(n, t_total);
    for t in 0..t_total {
        let s = purity_limited_dirichlet(n, cfg.max_purity, &mut rng)?;
        abundances.column_mut(t).copy_from_slice(&s);
    }

    let mut values = DMatrix::zeros(m, t_total);
    for t in 0..t_total {
        values.set_column(t, &(&per_pixel[t] * abundances.column(t)));
    }
    let power = values.column_iter().map(|c| c.norm_squared()).sum::<f64>() / t_total as f64;
    let noise_var = match cfg.snr_db {
        Some(snr) if snr.is_finite() => power / (m as f64 * 10f64.powf(snr / 10.0)),
        _ => 0.0,
    };
    if noise_var > 0.0 {
        let sd = noise_var.sqrt();
        for v in values.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut outlier_mask = vec![false; t_total];
    let mut picks = rand::seq::index::sample(&mut rng, t_total, cfg.n_outliers).into_vec();
    picks.sort_unstable();
    for t in picks {
        outlier_mask[t] = true;
        for b in 0..m {
            values[(b, t)] = uniform(&mut rng, cfg.outlier_range.0, cfg.outlier_range.1);
        }
    }

    Ok(SynthGroundTruth {
        cube: HsiCube::new(rows, cols, values)?,
        base_endmembers: base,
        per_pixel_endmembers: per_pixel,
        abundances,
        outlier_mask,
        noise_var,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    /// Direct 2-D convolution with an outer-product kernel and the same padding.
    fn direct_blur(field: &DMatrix<f64>, size: usize, sigma: f64) -> DMatrix<f64> {
        let k = gaussian_kernel(size, sigma);
        let r = (size / 2) as isize;
        let (h, w) = field.shape();
        DMatrix::from_fn(h, w, |i, j| {
            let mut acc = 0.0;
            for (p, kp) in k.iter().enumerate() {
                for (q, kq) in k.iter().enumerate() {
                    let ii = reflect(i as isize + p as isize - r, h);
                    let jj = reflect(j as isize + q as isize - r, w);
                    acc += kp * kq * field[(ii, jj)];
                }
            }
            acc
        })
    }

    #[test]
    fn reflect_repeats_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_keeps_constants() {
        let f = DMatrix::from_element(7, 9, 0.37);
        let b = gaussian_blur_2d(&f, 11, 1.0).unwrap();
        assert!((b - f).amax() < 1e-12);
    }

    #[test]
    fn blurred_impulse_is_symmetric() {
        let mut f = DMatrix::zeros(31, 31);
        f[(15, 15)] = 1.0;
        let b = gaussian_blur_2d(&f, 11, 1.0).unwrap();
        for i in 0..31 {
            for j in 0..31 {
                assert!((b[(i, j)] - b[(30 - i, j)]).abs() < 1e-12);
                assert!((b[(i, j)] - b[(j, i)]).abs() < 1e-12);
            }
        }
        assert!((b.sum() - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(11, 1.0);
        assert!((b[(15, 15)] - k[5] * k[5]).abs() < 1e-15);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(gaussian_blur_2d(&DMatrix::zeros(3, 3), 4, 1.0), Err(HelenError::InvalidArgument(_))));
    }

    #[test]
    fn noiseless_case_without_variability_is_exact() {
        let cfg = SynthConfig {
            rows: 10,
            cols: 10,
            bands: 8,
            snr_db: None,
            ev_scale_range: (1.0, 1.0),
            ev_perturb_std: 0.0,
            seed: 2,
            ..Default::default()
        };
        let gt = generate(&cfg).unwrap();
        assert_eq!(gt.noise_var, 0.0);
        for (t, a) in gt.per_pixel_endmembers.iter().enumerate() {
            assert!((a - &gt.base_endmembers).amax() < 1e-12);
            let y = a * gt.abundances.column(t);
            let diff = y.iter().zip(gt.cube.pixel(t)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn empirical_snr_is_close() {
        let cfg = SynthConfig { seed: 11, ..Default::default() };
        let gt = generate(&cfg).unwrap();
        let t = gt.cube.n_pixels();
        let (mut signal, mut noise) = (0.0, 0.0);
        for p in 0..t {
            let clean = &gt.per_pixel_endmembers[p] * gt.abundances.column(p);
            signal += clean.norm_squared();
            noise += clean.iter().zip(gt.cube.pixel(p)).map(|(c, y)| (y - c).powi(2)).sum::<f64>();
        }
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 25.0).abs() < 0.2, "snr {snr}");
    }

    #[test]
    fn outliers_and_purity() {
        let cfg = SynthConfig { rows: 20, cols: 20, bands: 10, n_outliers: 7, seed: 5, ..Default::default() };
        let gt = generate(&cfg).unwrap();
        assert_eq!(gt.outlier_mask.iter().filter(|&&b| b).count(), 7);
        for col in gt.abundances.column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|&s| (0.0..=0.7).contains(&s)));
        }
        for (t, &out) in gt.outlier_mask.iter().enumerate() {
            if out {
                assert!(gt.cube.pixel(t).iter().all(|&v| (0.0..2.0).contains(&v)));
            }
        }
        assert!(gt.per_pixel_endmembers.iter().all(|a| a.iter().all(|&v| v > 0.0 && v < 1.0)));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig { rows: 10, cols: 10, bands: 6, n_outliers: 2, seed: 3, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().cube, generate(&other).unwrap().cube);
    }

    #[test]
    fn impossible_purity_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(purity_limited_dirichlet(3, 0.3, &mut rng), Err(HelenError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn separable_blur_matches_direct(seed in 0u64..1000, sigma in 0.5f64..2.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DMatrix::from_fn(20, 20, |_, _| rng.random::<f64>());
            let fast = gaussian_blur_2d(&f, 11, sigma).unwrap();
            let slow = direct_blur(&f, 11, sigma);
            prop_assert!((fast - slow).amax() < 1e-12);
        }
    }
}

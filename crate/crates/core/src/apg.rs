//! Accelerated projected gradient ascent on box-constrained smooth objectives.
//!
//! Momentum uses the `(j - 1) / (j + 2)` extrapolation and is reset whenever
//! a step fails to improve on the best value, so every call is a monotone
//! ascent from its (projected) start.

use serde::{Deserialize, Serialize};

use crate::error::{HelenError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxProjection {
    pub lower: f64,
    pub upper: f64,
}

impl Default for BoxProjection {
    fn default() -> Self {
        Self { lower: 1e-6, upper: 1e6 }
    }
}

impl BoxProjection {
    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }
}

/// Per-coordinate box, assembled from contiguous [`BoxProjection`] segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(n: usize, b: BoxProjection) -> Self {
        Self::from_segments(&[(n, b)])
    }

    pub fn from_segments(segments: &[(usize, BoxProjection)]) -> Self {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for &(len, b) in segments {
            lower.extend(std::iter::repeat_n(b.lower, len));
            upper.extend(std::iter::repeat_n(b.upper, len));
        }
        Self { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| v >= lo && v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    Backtracking,
    FixedLipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApgConfig {
    pub max_iters: usize,
    pub backtrack_shrink: f64,
    pub init_step: f64,
    pub grad_tol: f64,
    pub mode: StepMode,
}

impl Default for ApgConfig {
    fn default() -> Self {
        Self { max_iters: 10, backtrack_shrink: 0.5, init_step: 1.0, grad_tol: 1e-9, mode: StepMode::Backtracking }
    }
}

impl ApgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(HelenError::Config("backtrack_shrink must lie in (0, 1)".into()));
        }
        if !(self.init_step > 0.0) || !self.init_step.is_finite() {
            return Err(HelenError::Config("init_step must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(HelenError::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApgOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Last accepted step size; callers may feed it back as `init_step`.
    pub step: f64,
}

const MIN_STEP: f64 = 1e-300;

/// Maximizes `objective` (returning value and gradient) over `bounds`.
///
/// In [`StepMode::FixedLipschitz`] the step is `1 / lipschitz`; otherwise it
/// is found by backtracking from `cfg.init_step`, tentatively growing by
/// `1 / backtrack_shrink` each iteration.
pub fn maximize<F>(mut objective: F, start: &[f64], bounds: &Bounds, cfg: &ApgConfig, lipschitz: Option<f64>) -> Result<ApgOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if bounds.len() != start.len() {
        return Err(HelenError::invalid("bounds and start differ in length"));
    }
    let fixed = cfg.mode == StepMode::FixedLipschitz;
    let mut step = if fixed {
        match lipschitz {
            Some(l) if l > 0.0 && l.is_finite() => 1.0 / l,
            _ => return Err(HelenError::invalid("fixed-lipschitz mode requires a positive Lipschitz constant")),
        }
    } else {
        cfg.init_step
    };

    let mut x = start.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut gx) = objective(&x);
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(HelenError::Numerical { message: "non-finite objective at APG start".into(), iterate: x });
    }
    let n = x.len();
    let mut x_prev = x.clone();
    let mut momentum = 1usize;
    let mut iterations = 0;
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];

    while iterations < cfg.max_iters {
        iterations += 1;
        let beta = (momentum as f64 - 1.0) / (momentum as f64 + 2.0);
        let (fy, gy) = if beta > 0.0 {
            for i in 0..n {
                y[i] = x[i] + beta * (x[i] - x_prev[i]);
            }
            bounds.project(&mut y);
            let (fy, gy) = objective(&y);
            if fy.is_finite() && gy.iter().all(|g| g.is_finite()) {
                (fy, gy)
            } else {
                y.copy_from_slice(&x);
                (fx, gx.clone())
            }
        } else {
            y.copy_from_slice(&x);
            (fx, gx.clone())
        };

        if !fixed {
            step /= cfg.backtrack_shrink;
        }
        let mut accepted: Option<(f64, Vec<f64>)> = None;
        let mut dist2;
        loop {
            for i in 0..n {
                z[i] = y[i] + step * gy[i];
            }
            bounds.project(&mut z);
            let (fz, gz) = objective(&z);
            let mut lin = 0.0;
            dist2 = 0.0;
            for i in 0..n {
                let d = z[i] - y[i];
                lin += gy[i] * d;
                dist2 += d * d;
            }
            let finite = fz.is_finite() && gz.iter().all(|g| g.is_finite());
            let slack = 1e-14 * fy.abs().max(1.0);
            if finite && (fixed || fz >= fy + lin - dist2 / (2.0 * step) - slack) {
                accepted = Some((fz, gz));
                break;
            }
            if fixed {
                break;
            }
            step *= cfg.backtrack_shrink;
            if step < MIN_STEP {
                break;
            }
        }

        match accepted {
            Some((fz, gz)) if fz >= fx => {
                x_prev.copy_from_slice(&x);
                x.copy_from_slice(&z);
                fx = fz;
                gx = gz;
                momentum += 1;
            }
            _ => {
                if beta == 0.0 {
                    // no ascent even from the current best point
                    break;
                }
                momentum = 1;
                x_prev.copy_from_slice(&x);
                if step < MIN_STEP {
                    step = cfg.init_step;
                }
                continue;
            }
        }
        if dist2.sqrt() / step < cfg.grad_tol {
            break;
        }
    }

    Ok(ApgOutcome { x, value: fx, iterations, step })
}

/// [`maximize`] with the coordinates flagged in `log_coords` optimized as
/// `ln x`. Their bounds must be positive; the feasible set is unchanged.
/// Positive parameters whose scales span orders of magnitude are badly
/// conditioned in linear coordinates and crawl under a single step size.
pub fn maximize_log_coords<F>(mut objective: F, start: &[f64], bounds: &Bounds, cfg: &ApgConfig, log_coords: &[bool]) -> Result<ApgOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if log_coords.len() != start.len() || bounds.len() != start.len() {
        return Err(HelenError::invalid("log mask, bounds and start differ in length"));
    }
    if log_coords.iter().zip(&bounds.lower).any(|(&l, &lo)| l && !(lo > 0.0)) {
        return Err(HelenError::invalid("log coordinates need a positive lower bound"));
    }
    let to_x = |z: &[f64]| -> Vec<f64> { z.iter().zip(log_coords).map(|(&v, &l)| if l { v.exp() } else { v }).collect() };
    let mut x0 = start.to_vec();
    bounds.project(&mut x0);
    let z0: Vec<f64> = x0.iter().zip(log_coords).map(|(&v, &l)| if l { v.ln() } else { v }).collect();
    let zb = Bounds {
        lower: bounds.lower.iter().zip(log_coords).map(|(&v, &l)| if l { v.ln() } else { v }).collect(),
        upper: bounds.upper.iter().zip(log_coords).map(|(&v, &l)| if l { v.ln() } else { v }).collect(),
    };
    let wrapped = |z: &[f64]| {
        let x = to_x(z);
        let (v, mut g) = objective(&x);
        for ((gi, xi), &l) in g.iter_mut().zip(&x).zip(log_coords) {
            if l {
                *gi *= xi;
            }
        }
        (v, g)
    };
    let out = maximize(wrapped, &z0, &zb, cfg, None)?;
    let mut x = to_x(&out.x);
    // exp(ln x) may miss x by an ulp; keep the exact start when nothing improved
    let mut value = out.value;
    if out.x == z0 {
        x = x0;
        value = objective(&x).0;
    }
    // rounding in exp can step an ulp outside the box
    let before = x.clone();
    bounds.project(&mut x);
    if x != before {
        value = objective(&x).0;
    }
    Ok(ApgOutcome { x, value, iterations: out.iterations, step: out.step })
}

//! Evaluation against ground truth: permutation alignment, spectral angle,
//! endmember MSE, abundance RMSE and outlier detection scores.
//!
//! A permutation `perm` maps truth column `n` to estimated column `perm[n]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HelenError, Result};

/// Floor reported by [`mse_db`] for an exact match.
pub const MSE_DB_FLOOR: f64 = -300.0;
const EXHAUSTIVE_MAX: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sam_deg: f64,
    pub mse_db: f64,
    pub rmse_s: f64,
    pub outlier_precision: f64,
    pub outlier_recall: f64,
    pub outlier_f1: f64,
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn included(mask: Option<&[bool]>, t: usize) -> bool {
    mask.is_none_or(|m| !m[t])
}

fn check_lists(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], mask: Option<&[bool]>) -> Result<()> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(HelenError::Data("endmember lists differ in length or are empty".into()));
    }
    if est.iter().chain(truth).any(|a| a.shape() != truth[0].shape()) {
        return Err(HelenError::Data("endmember matrices differ in shape".into()));
    }
    if mask.is_some_and(|m| m.len() != truth.len()) {
        return Err(HelenError::Data("mask length differs from pixel count".into()));
    }
    Ok(())
}

fn angle_deg(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(HelenError::Data("spectral angle of a zero column is undefined".into()));
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0).acos().to_degrees())
}

/// `cost[(n, j)]`: mean angle between truth column `n` and estimated column `j`.
pub fn angle_cost(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], mask: Option<&[bool]>) -> Result<DMatrix<f64>> {
    check_lists(est, truth, mask)?;
    let n = truth[0].ncols();
    let mut cost = DMatrix::zeros(n, n);
    let mut count = 0usize;
    for t in 0..truth.len() {
        if !included(mask, t) {
            continue;
        }
        count += 1;
        for i in 0..n {
            for j in 0..n {
                cost[(i, j)] += angle_deg(truth[t].column(i).as_slice(), est[t].column(j).as_slice())?;
            }
        }
    }
    if count == 0 {
        return Err(HelenError::Data("mask excludes every pixel".into()));
    }
    Ok(cost / count as f64)
}

fn permutation_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Minimum-cost assignment by enumerating all permutations.
pub fn exhaustive_permutation(cost: &DMatrix<f64>) -> Vec<usize> {
    fn rec(cost: &DMatrix<f64>, i: usize, used: &mut [bool], cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        let n = cost.nrows();
        if i == n {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, i + 1, used, cur, acc + cost[(i, j)], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let n = cost.nrows();
    let mut best = (f64::INFINITY, (0..n).collect());
    rec(cost, 0, &mut vec![false; n], &mut Vec::with_capacity(n), 0.0, &mut best);
    best.1
}

/// Repeatedly matches the globally cheapest remaining pair.
pub fn greedy_permutation(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut perm = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for _ in 0..n {
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..n).filter(|&i| perm[i] == usize::MAX) {
            for j in (0..n).filter(|&j| !col_used[j]) {
                if cost[(i, j)] < best.0 {
                    best = (cost[(i, j)], i, j);
                }
            }
        }
        perm[best.1] = best.2;
        col_used[best.2] = true;
    }
    perm
}

/// Permutation minimizing the mean SAM between matched columns.
pub fn align_permutation(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], mask: Option<&[bool]>) -> Result<Vec<usize>> {
    let cost = angle_cost(est, truth, mask)?;
    if cost.nrows() <= EXHAUSTIVE_MAX {
        Ok(exhaustive_permutation(&cost))
    } else {
        log::warn!("{} endmembers: using greedy matching", cost.nrows());
        Ok(greedy_permutation(&cost))
    }
}

/// Assignment cost of `perm` under `cost`, for comparing search strategies.
pub fn assignment_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    permutation_cost(cost, perm)
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
        return Err(HelenError::Data("permutation does not match endmember count".into()));
    }
    Ok(())
}

/// Mean spectral angle in degrees over included pixels and endmembers.
pub fn sam(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], perm: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    check_lists(est, truth, mask)?;
    let n = truth[0].ncols();
    check_perm(perm, n)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in (0..truth.len()).filter(|&t| included(mask, t)) {
        for (i, &j) in perm.iter().enumerate() {
            total += angle_deg(truth[t].column(i).as_slice(), est[t].column(j).as_slice())?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(HelenError::Data("mask excludes every pixel".into()));
    }
    Ok(total / count as f64)
}

/// 10 log10 of the mean of ‖A_t − Â_t P‖_F² / N.
pub fn mse_db(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], perm: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    check_lists(est, truth, mask)?;
    let n = truth[0].ncols();
    check_perm(perm, n)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in (0..truth.len()).filter(|&t| included(mask, t)) {
        for (i, &j) in perm.iter().enumerate() {
            total += (truth[t].column(i) - est[t].column(j)).norm_squared() / n as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(HelenError::Data("mask excludes every pixel".into()));
    }
    let mse = total / count as f64;
    Ok(if mse > 0.0 { (10.0 * mse.log10()).max(MSE_DB_FLOOR) } else { MSE_DB_FLOOR })
}

/// Mean over included pixels of sqrt(‖s_t − ŝ_t‖² / N). Both matrices are `N x T`.
pub fn rmse_s(est: &DMatrix<f64>, truth: &DMatrix<f64>, perm: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(HelenError::Data("abundance matrices differ in shape".into()));
    }
    let (n, t_total) = truth.shape();
    check_perm(perm, n)?;
    if mask.is_some_and(|m| m.len() != t_total) {
        return Err(HelenError::Data("mask length differs from pixel count".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in (0..t_total).filter(|&t| included(mask, t)) {
        let sq: f64 = perm.iter().enumerate().map(|(i, &j)| (truth[(i, t)] - est[(j, t)]).powi(2)).sum();
        total += (sq / n as f64).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(HelenError::Data("mask excludes every pixel".into()));
    }
    Ok(total / count as f64)
}

/// Scores of the detector `ω_t > threshold` against `mask`. An empty
/// predicted (or actual) positive set gives precision (recall) 1.
pub fn outlier_scores(omega: &[f64], mask: &[bool], threshold: f64) -> Result<OutlierScores> {
    if omega.len() != mask.len() {
        return Err(HelenError::Data("omega and mask lengths differ".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&w, &m) in omega.iter().zip(mask) {
        match (w > threshold, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(OutlierScores { precision, recall, f1 })
}

/// Full report. Outlier pixels (per `mask`) are left out of the SAM, MSE
/// and RMSE averages.
pub fn evaluate(
    est_endmembers: &[DMatrix<f64>],
    est_abundances: &DMatrix<f64>,
    omega: &[f64],
    truth_endmembers: &[DMatrix<f64>],
    truth_abundances: &DMatrix<f64>,
    mask: &[bool],
) -> Result<EvalReport> {
    let m = Some(mask);
    let perm = align_permutation(est_endmembers, truth_endmembers, m)?;
    let scores = outlier_scores(omega, mask, 0.5)?;
    Ok(EvalReport {
        sam_deg: sam(est_endmembers, truth_endmembers, &perm, m)?,
        mse_db: mse_db(est_endmembers, truth_endmembers, &perm, m)?,
        rmse_s: rmse_s(est_abundances, truth_abundances, &perm, m)?,
        outlier_precision: scores.precision,
        outlier_recall: scores.recall,
        outlier_f1: scores.f1,
        permutation: perm,
    })
}

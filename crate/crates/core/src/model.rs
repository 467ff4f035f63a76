//! Core data types: the image cube, its patch partition, model parameters
//! and the variational state.

use nalgebra::{DMatrix, DVector};

use crate::error::{HelenError, Result};
use crate::priors::{PosteriorParams, PriorParams};

/// An `M`-band image of `T = rows * cols` pixels.
///
/// Values are held as an `M x T` column-major matrix so every pixel spectrum
/// is contiguous. Pixel `t` sits at row `t / cols`, column `t % cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    rows: usize,
    cols: usize,
    values: DMatrix<f64>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, values: DMatrix<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.nrows() == 0 {
            return Err(HelenError::invalid("cube dimensions must be positive"));
        }
        if values.ncols() != rows * cols {
            return Err(HelenError::invalid(format!(
                "cube has {} pixels, expected rows*cols = {}",
                values.ncols(),
                rows * cols
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HelenError::Data(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a cube from band-major samples (all of band 1, then band 2, ...),
    /// each band stored in pixel row-major order.
    pub fn from_band_major(rows: usize, cols: usize, bands: usize, data: &[f64]) -> Result<Self> {
        let t = rows * cols;
        if data.len() != t * bands {
            return Err(HelenError::invalid("band-major buffer length mismatch"));
        }
        let values = DMatrix::from_fn(bands, t, |m, p| data[m * t + p]);
        Self::new(rows, cols, values)
    }

    pub fn to_band_major(&self) -> Vec<f64> {
        let (m, t) = self.values.shape();
        let mut out = Vec::with_capacity(m * t);
        for band in 0..m {
            out.extend((0..t).map(|p| self.values[(band, p)]));
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn pixel(&self, t: usize) -> &[f64] {
        let m = self.bands();
        &self.values.as_slice()[t * m..(t + 1) * m]
    }
}

/// Partition of the pixel grid into rectangular, non-overlapping patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// pixel index -> patch index
    pub assignment: Vec<usize>,
    /// patch index -> pixel indices, in row-major order
    pub members: Vec<Vec<usize>>,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.members.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// Tiles a `rows x cols` grid with `patch_rows x patch_cols` blocks in
/// row-major patch order. Partial tiles on the right and bottom edges are
/// kept as their own, smaller patches.
pub fn partition_image(rows: usize, cols: usize, patch_rows: usize, patch_cols: usize) -> Result<PatchGrid> {
    if rows == 0 || cols == 0 || patch_rows == 0 || patch_cols == 0 {
        return Err(HelenError::invalid("partition dimensions must be >= 1"));
    }
    if patch_rows > rows || patch_cols > cols {
        return Err(HelenError::invalid("patch larger than image"));
    }
    let tiles_r = rows.div_ceil(patch_rows);
    let tiles_c = cols.div_ceil(patch_cols);
    let mut members = vec![Vec::new(); tiles_r * tiles_c];
    let mut assignment = vec![0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let k = (r / patch_rows) * tiles_c + c / patch_cols;
            let t = r * cols + c;
            assignment[t] = k;
            members[k].push(t);
        }
    }
    Ok(PatchGrid { rows, cols, patch_rows, patch_cols, assignment, members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierKind {
    IidGaussian,
}

/// Density of the outlier component, shared by all bands.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierDensity {
    #[serde(default = "default_outlier_kind")]
    pub kind: OutlierKind,
    pub mean: f64,
    pub variance: f64,
}

fn default_outlier_kind() -> OutlierKind {
    OutlierKind::IidGaussian
}

impl Default for OutlierDensity {
    fn default() -> Self {
        Self { kind: OutlierKind::IidGaussian, mean: 0.0, variance: 9.0 }
    }
}

impl OutlierDensity {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !self.variance.is_finite() || !self.mean.is_finite() {
            return Err(HelenError::invalid("outlier density needs finite mean and positive variance"));
        }
        Ok(())
    }
}

/// Σ_m log N(y_m; mean, variance), evaluated in the log domain.
pub fn log_outlier_density(y: &[f64], d: &OutlierDensity) -> f64 {
    let OutlierKind::IidGaussian = d.kind;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * d.variance).ln();
    let inv2v = 0.5 / d.variance;
    y.iter().map(|&v| norm - (v - d.mean) * (v - d.mean) * inv2v).sum()
}

/// Model parameters θ: endmember prior, noise variance and outlier rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub prior: PriorParams,
    pub noise_var: f64,
    pub outlier_rate: f64,
    pub outlier_density: OutlierDensity,
}

/// Variational parameters: per-pixel Dirichlet parameters (columns of an
/// `N x T` matrix), outlier responsibilities and per-patch posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub alpha: DMatrix<f64>,
    pub omega: Vec<f64>,
    pub patch_posteriors: Vec<PosteriorParams>,
}

impl VariationalState {
    pub fn alpha_of(&self, t: usize) -> DVector<f64> {
        self.alpha.column(t).into_owned()
    }
}

/// Output of an unmixing run.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    /// Posterior-mean endmember matrix per patch (`M x N`).
    pub endmembers: Vec<DMatrix<f64>>,
    /// `N x T`; column `t` is the abundance estimate of pixel `t`.
    pub abundances: DMatrix<f64>,
    pub outlier_scores: Vec<f64>,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub model: ModelParameters,
    pub grid: PatchGrid,
}

impl UnmixResult {
    /// Replicates the patch estimates onto every pixel of the patch.
    pub fn per_pixel_endmembers(&self) -> Vec<DMatrix<f64>> {
        self.grid.assignment.iter().map(|&k| self.endmembers[k].clone()).collect()
    }
}

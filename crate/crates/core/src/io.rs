//! File formats: the binary cube, JSON documents with fixed float
//! formatting, run configuration and CSV exports.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{HelenError, Result};
use crate::metrics::EvalReport;
use crate::model::{HsiCube, ModelParameters, OutlierDensity, PatchGrid, UnmixResult};
use crate::priors::{Family, PriorParams};
use crate::synth::{SynthConfig, SynthGroundTruth};

pub const CUBE_MAGIC: &[u8; 4] = b"HYPC";
pub const CUBE_VERSION: u16 = 1;
pub const CUBE_HEADER_LEN: usize = 18;

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> std::result::Result<DMatrix<f64>, E> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(E::custom("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

/// Serde adapter: a matrix as a list of rows.
pub mod matrix_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        rows_of(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }
}

/// Serde adapter for an optional matrix stored as a list of rows.
pub mod opt_matrix_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(rows_of).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?.map(from_rows).transpose()
    }
}

/// Encodes a cube: header, then band-major little-endian f64 samples.
pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let dim = |v: usize, name: &str| u32::try_from(v).map_err(|_| HelenError::invalid(format!("{name} exceeds u32")));
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 8 * cube.values().len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(cube.rows(), "rows")?.to_le_bytes());
    out.extend_from_slice(&dim(cube.cols(), "cols")?.to_le_bytes());
    out.extend_from_slice(&dim(cube.bands(), "bands")?.to_le_bytes());
    for v in cube.to_band_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let fmt = |offset: usize, message: &str| HelenError::Format { offset: offset as u64, message: message.into() };
    if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
        return Err(fmt(0, "bad magic, expected HYPC"));
    }
    if bytes.len() < CUBE_HEADER_LEN {
        return Err(fmt(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CUBE_VERSION {
        return Err(fmt(4, &format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as u64;
    let (rows, cols, bands) = (u32_at(6), u32_at(10), u32_at(14));
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(fmt(6, "zero dimension in header"));
    }
    let payload = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(bands))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| fmt(6, "declared size overflows"))?;
    let have = (bytes.len() - CUBE_HEADER_LEN) as u64;
    if have < payload {
        return Err(fmt(bytes.len(), &format!("truncated payload: {have} of {payload} bytes")));
    }
    if have > payload {
        return Err(fmt(CUBE_HEADER_LEN + payload as usize, "trailing bytes after payload"));
    }
    let data: Vec<f64> = bytes[CUBE_HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fmt(CUBE_HEADER_LEN + 8 * i, "non-finite sample"));
    }
    HsiCube::from_band_major(rows as usize, cols as usize, bands as usize, &data)
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_cube(cube)?)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_cube(&std::fs::read(path)?)
}

/// Writes every float with 17 significant digits so reruns are byte-identical
/// and values survive a text roundtrip exactly.
struct FixedFloat;

impl serde_json::ser::Formatter for FixedFloat {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        if v.is_finite() {
            write!(w, "{v:.16e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloat);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Run configuration file with optional engine and synth sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HelenError::Config(e.to_string()))?;
        cfg.engine.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HelenError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Ground truth as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub n_endmembers: usize,
    pub noise_var: f64,
    pub outlier_mask: Vec<bool>,
    /// One abundance vector per pixel.
    pub abundances: Vec<Vec<f64>>,
    #[serde(with = "matrix_rows")]
    pub base_endmembers: DMatrix<f64>,
    /// One `M x N` matrix (rows = bands) per pixel.
    pub per_pixel_endmembers: Vec<Vec<Vec<f64>>>,
}

impl TruthFile {
    pub fn from_truth(gt: &SynthGroundTruth) -> Self {
        Self {
            rows: gt.cube.rows(),
            cols: gt.cube.cols(),
            bands: gt.cube.bands(),
            n_endmembers: gt.abundances.nrows(),
            noise_var: gt.noise_var,
            outlier_mask: gt.outlier_mask.clone(),
            abundances: gt.abundances.column_iter().map(|c| c.iter().copied().collect()).collect(),
            base_endmembers: gt.base_endmembers.clone(),
            per_pixel_endmembers: gt.per_pixel_endmembers.iter().map(rows_of).collect(),
        }
    }

    pub fn endmembers(&self) -> Result<Vec<DMatrix<f64>>> {
        self.per_pixel_endmembers.iter().map(|r| matrix_checked(r.clone(), self.bands, self.n_endmembers)).collect()
    }

    pub fn abundance_matrix(&self) -> Result<DMatrix<f64>> {
        columns_checked(&self.abundances, self.n_endmembers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path).map_err(as_data)
    }
}

fn as_data(e: HelenError) -> HelenError {
    match e {
        HelenError::Json(j) => HelenError::Data(j.to_string()),
        other => other,
    }
}

fn matrix_checked(rows: Vec<Vec<f64>>, m: usize, n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != n) {
        return Err(HelenError::Data(format!("expected a {m} x {n} matrix")));
    }
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

fn columns_checked(cols: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if cols.iter().any(|c| c.len() != n) {
        return Err(HelenError::Data(format!("abundance vectors must have length {n}")));
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, t| cols[t][i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub noise_var: f64,
    pub outlier_rate: f64,
    pub outlier_density: OutlierDensity,
    pub prior_family: Family,
    #[serde(with = "matrix_rows")]
    pub prior_first: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub prior_second: DMatrix<f64>,
}

/// Unmixing output as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub n_endmembers: usize,
    pub grid: GridFile,
    /// Posterior-mean endmembers, one `M x N` matrix (rows = bands) per patch.
    pub endmembers: Vec<Vec<Vec<f64>>>,
    pub abundances: Vec<Vec<f64>>,
    pub outlier_scores: Vec<f64>,
    pub model: ModelFile,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ResultFile {
    pub fn from_result(r: &UnmixResult) -> Self {
        let (m, n) = r.endmembers[0].shape();
        Self {
            rows: r.grid.rows,
            cols: r.grid.cols,
            bands: m,
            n_endmembers: n,
            grid: GridFile { patch_rows: r.grid.patch_rows, patch_cols: r.grid.patch_cols, assignment: r.grid.assignment.clone() },
            endmembers: r.endmembers.iter().map(rows_of).collect(),
            abundances: r.abundances.column_iter().map(|c| c.iter().copied().collect()).collect(),
            outlier_scores: r.outlier_scores.clone(),
            model: ModelFile {
                noise_var: r.model.noise_var,
                outlier_rate: r.model.outlier_rate,
                outlier_density: r.model.outlier_density,
                prior_family: r.model.prior.family,
                prior_first: r.model.prior.first.clone(),
                prior_second: r.model.prior.second.clone(),
            },
            elbo_trace: r.elbo_trace.clone(),
            iterations: r.iterations,
            converged: r.converged,
        }
    }

    /// Rebuilds the in-memory result, including the patch grid.
    pub fn to_result(&self) -> Result<UnmixResult> {
        let t = self.rows * self.cols;
        if self.grid.assignment.len() != t || self.abundances.len() != t || self.outlier_scores.len() != t {
            return Err(HelenError::Data("result arrays do not match rows*cols".into()));
        }
        let endmembers = self
            .endmembers
            .iter()
            .map(|e| matrix_checked(e.clone(), self.bands, self.n_endmembers))
            .collect::<Result<Vec<_>>>()?;
        let k = endmembers.len();
        if self.grid.assignment.iter().any(|&a| a >= k) {
            return Err(HelenError::Data("patch assignment out of range".into()));
        }
        let mut members = vec![Vec::new(); k];
        for (p, &a) in self.grid.assignment.iter().enumerate() {
            members[a].push(p);
        }
        let prior = PriorParams {
            family: self.model.prior_family,
            first: self.model.prior_first.clone(),
            second: self.model.prior_second.clone(),
        };
        Ok(UnmixResult {
            endmembers,
            abundances: columns_checked(&self.abundances, self.n_endmembers)?,
            outlier_scores: self.outlier_scores.clone(),
            elbo_trace: self.elbo_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            model: ModelParameters {
                prior,
                noise_var: self.model.noise_var,
                outlier_rate: self.model.outlier_rate,
                outlier_density: self.model.outlier_density,
            },
            grid: PatchGrid {
                rows: self.rows,
                cols: self.cols,
                patch_rows: self.grid.patch_rows,
                patch_cols: self.grid.patch_cols,
                assignment: self.grid.assignment.clone(),
                members,
            },
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path).map_err(as_data)
    }
}

/// Report produced by `eval`.
pub fn report_json(report: &EvalReport) -> Result<String> {
    to_json(report)
}

/// `band,em1,...,emN` followed by one row per band.
pub fn endmember_csv(a: &DMatrix<f64>) -> String {
    let mut s = String::from("band");
    for j in 1..=a.ncols() {
        s.push_str(&format!(",em{j}"));
    }
    s.push('\n');
    for (b, row) in a.row_iter().enumerate() {
        s.push_str(&(b + 1).to_string());
        for v in row.iter() {
            s.push_str(&format!(",{v:.16e}"));
        }
        s.push('\n');
    }
    s
}

pub fn elbo_csv_header() -> &'static str {
    "sweep,elbo,sigma2,gamma,seconds\n"
}

pub fn elbo_csv_row(r: &crate::engine::SweepRecord) -> String {
    format!("{},{:.16e},{:.16e},{:.16e},{:.6}\n", r.sweep, r.elbo, r.noise_var, r.outlier_rate, r.seconds)
}

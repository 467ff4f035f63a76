//! Python bindings for `helen-core`.
//!
//! Matrices cross the boundary as nested lists (row-major, one inner list per
//! row); configurations are JSON strings with the same keys as the CLI
//! config files.

use helen_core::io::{self, ResultFile, TruthFile};
use helen_core::{EngineConfig, HelenError, HsiCube, SynthConfig, UnmixResult};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(helen, HelenException, PyException, "Base class for errors raised by helen.");
create_exception!(helen, ConfigError, HelenException, "Invalid configuration.");
create_exception!(helen, DataError, HelenException, "Malformed or inconsistent input data.");
create_exception!(helen, NumericalError, HelenException, "Numerical failure during optimization.");

fn to_py(e: HelenError) -> PyErr {
    let msg = e.to_string();
    match e {
        HelenError::Config(_) | HelenError::InvalidArgument(_) => ConfigError::new_err(msg),
        HelenError::Numerical { .. } | HelenError::NonFiniteElbo { .. } | HelenError::Domain { .. } => NumericalError::new_err(msg),
        _ => DataError::new_err(msg),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn config_err(e: serde_json::Error) -> PyErr {
    ConfigError::new_err(e.to_string())
}

fn synth_config(text: Option<&str>) -> PyResult<SynthConfig> {
    text.map_or(Ok(SynthConfig::default()), |t| serde_json::from_str(t).map_err(config_err))
}

fn engine_config(text: Option<&str>) -> PyResult<EngineConfig> {
    text.map_or(Ok(EngineConfig::default()), |t| serde_json::from_str(t).map_err(config_err))
}

/// An image cube of `rows * cols` pixels with `bands` samples each.
#[pyclass(name = "Cube", module = "helen", frozen)]
struct PyCube {
    inner: HsiCube,
}

#[pymethods]
impl PyCube {
    /// Builds a cube from band-major samples (all of band 1 in pixel
    /// row-major order, then band 2, ...).
    #[new]
    fn new(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: HsiCube::from_band_major(rows, cols, bands, &data).map_err(to_py)? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::read_cube(path).map_err(to_py)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_cube(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.bands()
    }

    fn pixel(&self, t: usize) -> PyResult<Vec<f64>> {
        if t >= self.inner.n_pixels() {
            return Err(pyo3::exceptions::PyIndexError::new_err("pixel index out of range"));
        }
        Ok(self.inner.pixel(t).to_vec())
    }

    fn to_band_major(&self) -> Vec<f64> {
        self.inner.to_band_major()
    }

    fn __repr__(&self) -> String {
        format!("Cube(rows={}, cols={}, bands={})", self.inner.rows(), self.inner.cols(), self.inner.bands())
    }
}

/// Ground truth of a synthetic cube.
#[pyclass(name = "Truth", module = "helen", frozen)]
struct PyTruth {
    inner: TruthFile,
}

#[pymethods]
impl PyTruth {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: TruthFile::load(path).map_err(to_py)? })
    }

    #[getter]
    fn base_endmembers(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.base_endmembers)
    }

    /// One abundance vector per pixel.
    #[getter]
    fn abundances(&self) -> Vec<Vec<f64>> {
        self.inner.abundances.clone()
    }

    #[getter]
    fn outlier_mask(&self) -> Vec<bool> {
        self.inner.outlier_mask.clone()
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.inner.noise_var
    }

    fn to_json(&self) -> PyResult<String> {
        io::to_json(&self.inner).map_err(to_py)
    }
}

/// Output of [`unmix`].
#[pyclass(name = "UnmixResult", module = "helen", frozen)]
struct PyUnmixResult {
    inner: UnmixResult,
}

#[pymethods]
impl PyUnmixResult {
    /// Posterior-mean endmember matrix (bands x endmembers) per patch.
    #[getter]
    fn endmembers(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.endmembers.iter().map(rows_of).collect()
    }

    /// One abundance vector per pixel.
    #[getter]
    fn abundances(&self) -> Vec<Vec<f64>> {
        self.inner.abundances.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[getter]
    fn outlier_scores(&self) -> Vec<f64> {
        self.inner.outlier_scores.clone()
    }

    #[getter]
    fn elbo_trace(&self) -> Vec<f64> {
        self.inner.elbo_trace.clone()
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.inner.model.noise_var
    }

    #[getter]
    fn outlier_rate(&self) -> f64 {
        self.inner.model.outlier_rate
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn patch_assignment(&self) -> Vec<usize> {
        self.inner.grid.assignment.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        io::to_json(&ResultFile::from_result(&self.inner)).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = ResultFile::load(path).map_err(to_py)?;
        Ok(Self { inner: file.to_result().map_err(to_py)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "UnmixResult(patches={}, sweeps={}, converged={})",
            self.inner.endmembers.len(),
            self.inner.iterations,
            self.inner.converged
        )
    }
}

/// Generates a synthetic cube. `config` is a JSON object with synth keys.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synthesize(py: Python<'_>, config: Option<&str>) -> PyResult<(PyCube, PyTruth)> {
    let cfg = synth_config(config)?;
    let gt = py.detach(|| helen_core::synth::generate(&cfg)).map_err(to_py)?;
    let truth = TruthFile::from_truth(&gt);
    Ok((PyCube { inner: gt.cube }, PyTruth { inner: truth }))
}

/// Runs the engine on `cube`. `config` is a JSON object with engine keys.
#[pyfunction]
#[pyo3(signature = (cube, config=None))]
fn unmix(py: Python<'_>, cube: &PyCube, config: Option<&str>) -> PyResult<PyUnmixResult> {
    let cfg = engine_config(config)?;
    let inner = py.detach(|| helen_core::run(&cube.inner, &cfg)).map_err(to_py)?;
    Ok(PyUnmixResult { inner })
}

/// Scores a result against ground truth; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (result, truth, threshold=0.5))]
fn evaluate<'py>(py: Python<'py>, result: &PyUnmixResult, truth: &PyTruth, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let t = &truth.inner;
    let r = &result.inner;
    if t.n_endmembers != r.abundances.nrows() || t.rows * t.cols != r.abundances.ncols() {
        return Err(DataError::new_err("result and truth differ in shape"));
    }
    let report = helen_core::metrics::evaluate(
        &r.per_pixel_endmembers(),
        &r.abundances,
        &r.outlier_scores,
        &t.endmembers().map_err(to_py)?,
        &t.abundance_matrix().map_err(to_py)?,
        &t.outlier_mask,
    )
    .map_err(to_py)?;
    let scores = helen_core::metrics::outlier_scores(&r.outlier_scores, &t.outlier_mask, threshold).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("sam_deg", report.sam_deg)?;
    d.set_item("mse_db", report.mse_db)?;
    d.set_item("rmse_s", report.rmse_s)?;
    d.set_item("outlier_precision", scores.precision)?;
    d.set_item("outlier_recall", scores.recall)?;
    d.set_item("outlier_f1", scores.f1)?;
    d.set_item("permutation", report.permutation)?;
    Ok(d)
}

/// Patch members (pixel indices, row-major) of a `rows x cols` grid.
#[pyfunction]
fn partition(rows: usize, cols: usize, patch_rows: usize, patch_cols: usize) -> PyResult<Vec<Vec<usize>>> {
    Ok(helen_core::model::partition_image(rows, cols, patch_rows, patch_cols).map_err(to_py)?.members)
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    helen_core::special::digamma(x).map_err(to_py)
}

/// Oracle checks as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (quick=true))]
fn selftest(py: Python<'_>, quick: bool) -> Vec<(String, bool, String)> {
    py.detach(|| helen_core::oracle::selftest(quick)).into_iter().map(|c| (c.name, c.passed, c.detail)).collect()
}

#[pymodule]
fn helen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("HelenException", py.get_type::<HelenException>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyCube>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyUnmixResult>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(unmix, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

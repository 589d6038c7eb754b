//! Python bindings: scenarios, data synthesis, full runs and a few of the
//! numerical building blocks. Matrices cross the boundary as lists of rows
//! of Python complex numbers.

use std::path::PathBuf;

use csi_core::harness::{self, NoiseMode, RunOptions, RunReport, Scenario};
use csi_core::io::{self, MatrixHeader};
use csi_core::mmv::{self, ContrastSourceMatrix};
use csi_core::CsiError;
use ndarray::Array2;
use num_complex::Complex64;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: CsiError) -> PyErr {
    match e {
        CsiError::Config(_) | CsiError::InvalidArgument(_) | CsiError::DimensionMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        CsiError::Io(_) | CsiError::BadFile(_) => PyOSError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<Complex64>>) -> PyResult<Array2<Complex64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Array2<Complex64>) -> Vec<Vec<Complex64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A scene and its run configuration.
#[pyclass(name = "Scenario", module = "csi3d", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario {
            inner: Scenario::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: Scenario::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn noise(&self) -> f64 {
        self.inner.noise
    }

    #[setter]
    fn set_noise(&mut self, noise: f64) -> PyResult<()> {
        if !(noise >= 0.0) {
            return Err(PyValueError::new_err("noise must be nonnegative"));
        }
        self.inner.noise = noise;
        Ok(())
    }

    #[getter]
    fn background_factor(&self) -> Option<f64> {
        self.inner.mismatch.background_factor
    }

    #[setter]
    fn set_background_factor(&mut self, factor: Option<f64>) {
        self.inner.mismatch.background_factor = factor;
    }

    #[getter]
    fn mmv_iterations(&self) -> usize {
        self.inner.mmv.max_iter
    }

    #[setter]
    fn set_mmv_iterations(&mut self, n: usize) {
        self.inner.mmv.max_iter = n;
    }

    #[getter]
    fn contrast_iterations(&self) -> usize {
        self.inner.contrast.iterations
    }

    #[setter]
    fn set_contrast_iterations(&mut self, n: usize) {
        self.inner.contrast.iterations = n;
    }

    #[getter]
    fn num_sources(&self) -> usize {
        self.inner.sources.layout.positions().len()
    }

    #[getter]
    fn num_receivers(&self) -> usize {
        self.inner.receivers.layout.positions().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name={:?}, seed={}, noise={}, sources={}, receivers={})",
            self.inner.name,
            self.inner.seed,
            self.inner.noise,
            self.num_sources(),
            self.num_receivers()
        )
    }
}

/// Everything a run produces.
#[pyclass(name = "RunReport", module = "csi3d", frozen)]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = &self.inner.metrics;
        let d = PyDict::new(py);
        d.set_item("centroid_error", m.centroid_error)?;
        d.set_item("support_overlap", m.support_overlap)?;
        d.set_item("support_cells", m.support_cells)?;
        d.set_item("positive_support", m.positive_support)?;
        d.set_item("constraints_hold", m.constraints_hold)?;
        Ok(d)
    }

    /// Contrast values, three per inversion-domain cell.
    fn chi(&self) -> Vec<Complex64> {
        self.inner.chi.values.clone()
    }

    fn contrast_indicator(&self) -> Vec<f64> {
        self.inner.contrast_indicator.clone()
    }

    fn source_indicator(&self) -> Vec<f64> {
        self.inner.source_indicator.clone()
    }

    /// Contrast sources, one column per source.
    fn sources(&self) -> Vec<Vec<Complex64>> {
        to_rows(&self.inner.j_hat.data)
    }

    /// `(iter, tau, gamma_r, gamma_cv)` rows.
    fn mmv_trace(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner
            .mmv_trace
            .iter()
            .flat_map(|t| t.records.iter().map(|r| (r.iter, r.tau, r.gamma_r, r.gamma_cv)))
            .collect()
    }

    /// `(iter, data_error, state_error)` rows.
    fn contrast_errors(&self) -> Vec<(usize, f64, f64)> {
        self.inner
            .contrast_history
            .records
            .iter()
            .map(|r| (r.iter, r.data_error, r.state_error))
            .collect()
    }

    fn timings(&self) -> Vec<(String, f64)> {
        self.inner.timings.iter().map(|(s, t)| (s.to_string(), *t)).collect()
    }

    /// Writes the report into a new directory.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(to_py)
    }
}

/// Scattered-field data from the refined truth grid, one column per source.
#[pyfunction]
fn synthesize_data(py: Python<'_>, scenario: &PyScenario) -> PyResult<Vec<Vec<Complex64>>> {
    let s = scenario.inner.clone();
    let f = py.detach(|| harness::synthesize_data(&s)).map_err(to_py)?;
    Ok(to_rows(&f))
}

#[pyfunction]
#[pyo3(signature = (data, zeta, seed, mode = "per-element"))]
fn add_noise(data: Vec<Vec<Complex64>>, zeta: f64, seed: u64, mode: &str) -> PyResult<Vec<Vec<Complex64>>> {
    let mode = match mode {
        "per-element" => NoiseMode::PerElement,
        "per-vector" => NoiseMode::PerVector,
        other => return Err(PyValueError::new_err(format!("unknown noise mode {other:?}"))),
    };
    if !(zeta >= 0.0) {
        return Err(PyValueError::new_err("zeta must be nonnegative"));
    }
    Ok(to_rows(&harness::add_noise(&to_array(data)?, zeta, seed, mode)))
}

/// Synthesize, add noise and invert. `cache` is a directory for
/// scattering matrices.
#[pyfunction]
#[pyo3(signature = (scenario, cache = None))]
fn run_scenario(py: Python<'_>, scenario: &PyScenario, cache: Option<PathBuf>) -> PyResult<PyRunReport> {
    let s = scenario.inner.clone();
    let report = py
        .detach(|| harness::run_scenario(&s, &RunOptions { phi_cache: cache }))
        .map_err(to_py)?;
    Ok(PyRunReport { inner: report })
}

/// Builds or loads the scattering matrix. Returns `(rows, cols, key, loaded)`.
#[pyfunction]
#[pyo3(signature = (scenario, cache = None))]
fn build_phi(py: Python<'_>, scenario: &PyScenario, cache: Option<PathBuf>) -> PyResult<(usize, usize, String, bool)> {
    let s = scenario.inner.clone();
    let (phi, loaded) = py.detach(|| harness::build_phi(&s, cache.as_deref())).map_err(to_py)?;
    Ok((phi.rows(), phi.cols(), phi.key, loaded))
}

/// Euclidean projection onto the group-l1 ball of radius `tau`, with groups
/// of three consecutive rows.
#[pyfunction]
fn project_group_l1(matrix: Vec<Vec<Complex64>>, tau: f64) -> PyResult<Vec<Vec<Complex64>>> {
    let j = ContrastSourceMatrix::new(to_array(matrix)?).map_err(to_py)?;
    Ok(to_rows(&mmv::project_group_l1(&j, tau).data))
}

#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<Vec<Vec<Complex64>>> {
    Ok(to_rows(&io::read_matrix(&path).map_err(to_py)?.1))
}

#[pyfunction]
#[pyo3(signature = (path, matrix, omega = 0.0, tol = 0.0, key = String::new()))]
fn write_matrix(path: PathBuf, matrix: Vec<Vec<Complex64>>, omega: f64, tol: f64, key: String) -> PyResult<()> {
    io::write_matrix(&path, &MatrixHeader { omega, tol, key }, &to_array(matrix)?).map_err(to_py)
}

#[pymodule]
fn csi3d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunReport>()?;
    m.add_function(wrap_pyfunction!(synthesize_data, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(build_phi, m)?)?;
    m.add_function(wrap_pyfunction!(project_group_l1, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix, m)?)?;
    Ok(())
}

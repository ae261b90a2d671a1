use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use physaug::experiments::{self, Manifest, RunResult};
use physaug::nbody::{self, ForceLaw, NBodySimConfig, NBodyState};
use physaug::network::{Activation, MlpNetwork, MlpSpec};
use physaug::properties::{self, PropertyKind, PropertyModel, PropertyTask};
use physaug::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Training(_) | Error::Singularity { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_kind(task: &str) -> PyResult<PropertyKind> {
    task.parse().map_err(to_py)
}

/// Ground truth of one regression task.
#[pyclass(name = "PropertyTask")]
struct PyPropertyTask {
    inner: PropertyTask,
}

#[pymethods]
impl PyPropertyTask {
    #[new]
    fn new(task: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PropertyTask::new(parse_kind(task)?),
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn truth(&self, x: Vec<f64>) -> f64 {
        self.inner.truth(&x)
    }

    fn satisfying_part(&self, x: Vec<f64>) -> f64 {
        self.inner.satisfying_part(&x)
    }

    fn violating_part(&self, x: Vec<f64>) -> f64 {
        self.inner.violating_part(&x)
    }

    /// `(inputs, labels)` sampled uniformly from the default domain.
    fn dataset(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = properties::generate_dataset(&self.inner, n, seed, &self.inner.default_domain())
            .map_err(to_py)?;
        let x = d.inputs.rows().into_iter().map(|r| r.to_vec()).collect();
        Ok((x, d.labels.to_vec()))
    }
}

/// Multilayer perceptron with deterministic initialization.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: MlpNetwork,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (widths, activation = "tanh", seed = 0))]
    fn new(widths: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(to_py)?;
        let inner = MlpNetwork::init(MlpSpec::new(widths, act, seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.flat_params()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat_params(&params).map_err(to_py)
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict(&rows_to_array(&inputs)?).map_err(to_py)?.to_vec())
    }
}

/// Trained model and its loss history.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    inner: RunResult,
}

#[pymethods]
impl PyRunResult {
    /// `(epoch, L1, L2)` per epoch.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64)> {
        self.inner.history.iter().map(|h| (h.epoch, h.l1, h.l2)).collect()
    }

    #[getter]
    fn final_l1(&self) -> f64 {
        self.inner.final_l1
    }

    #[getter]
    fn final_l2(&self) -> f64 {
        self.inner.final_l2
    }

    #[getter]
    fn aborted(&self) -> Option<String> {
        self.inner.aborted.clone()
    }

    /// Run identity, losses, and evaluation metrics as `(metric, value)`.
    fn summary(&self) -> PyResult<Vec<(String, String)>> {
        Ok(experiments::run_summary(&self.inner).map_err(to_py)?.rows)
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let m: &PropertyModel = &self.inner.model;
        Ok(m.predict(&rows_to_array(&inputs)?).map_err(to_py)?.to_vec())
    }

    fn checkpoint(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.model.write_checkpoint(&mut buf).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Writes history, summary, checkpoint and manifest into `dir`.
    fn save(&self, dir: &str) -> PyResult<Vec<String>> {
        let paths = experiments::write_run(std::path::Path::new(dir), &self.inner, &[]).map_err(to_py)?;
        Ok(paths.iter().map(|p| p.display().to_string()).collect())
    }
}

/// Trains from manifest text; `overrides` are `key=value` strings.
#[pyfunction]
#[pyo3(signature = (manifest, overrides = Vec::new()))]
fn train(py: Python<'_>, manifest: &str, overrides: Vec<String>) -> PyResult<PyRunResult> {
    let mut pairs = experiments::parse_pairs(manifest).map_err(to_py)?;
    for o in &overrides {
        pairs.push(experiments::parse_override(o).map_err(to_py)?);
    }
    let m = Manifest::from_pairs(&pairs).map_err(to_py)?;
    let inner = py.detach(|| experiments::train(&m.train)).map_err(to_py)?;
    Ok(PyRunResult { inner })
}

/// Parses manifest text and returns its canonical form.
#[pyfunction]
fn canonical_manifest(text: &str) -> PyResult<String> {
    Ok(Manifest::parse(text).map_err(to_py)?.to_text())
}

/// Force on body `j` exerted by body `i`.
#[pyfunction]
#[pyo3(signature = (xi, xj, force = "square"))]
fn pairwise_force(xi: [f64; 2], xj: [f64; 2], force: &str) -> PyResult<[f64; 2]> {
    let law: ForceLaw = force.parse().map_err(to_py)?;
    nbody::pairwise_force(xi, xj, &law).map_err(to_py)
}

type PyState = (Vec<[f64; 2]>, Vec<[f64; 2]>, f64);

/// Euler rollout of the reference five-body system, or of the given
/// `(positions, velocities)`; returns `(positions, velocities, t)` per state.
#[pyfunction]
#[pyo3(signature = (n_steps = 50, dt = 0.02, force = "square", positions = None, velocities = None))]
fn simulate(
    n_steps: usize,
    dt: f64,
    force: &str,
    positions: Option<Vec<[f64; 2]>>,
    velocities: Option<Vec<[f64; 2]>>,
) -> PyResult<Vec<PyState>> {
    let init = match (positions, velocities) {
        (Some(p), Some(v)) => NBodyState::new(p, v, 0.0).map_err(to_py)?,
        (None, None) => nbody::reference_initial_state(),
        _ => return Err(PyValueError::new_err("give both positions and velocities, or neither")),
    };
    let cfg = NBodySimConfig {
        n_bodies: init.n_bodies(),
        dt,
        n_steps,
        force_law: force.parse().map_err(to_py)?,
        mass: 1.0,
    };
    let traj = nbody::simulate(&cfg, &init).map_err(to_py)?;
    Ok(traj
        .states
        .into_iter()
        .map(|s| (s.positions, s.velocities, s.time))
        .collect())
}

#[pymodule]
fn physaug_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPropertyTask>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_force, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}

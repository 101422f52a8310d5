//! Python bindings for the `pidflow` estimator.
//!
//! Heavy calls release the interpreter lock. Structured results come back as
//! plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use serde_json::Value;

use pidflow::analysis::{compare_trajectories, dependence_score, knockout_deltas, ShareRow};
use pidflow::pid::{self, JointGaussian};
use pidflow::pipeline::{self, PipelineConfig, Profile, ReportFormat};
use pidflow::synth::{self, DiscreteSystem, RegimeScript};
use pidflow::trajectory::{self, SweepGrid, ThresholdConfig};
use pidflow::{store, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        3 => PyArithmeticError::new_err(msg),
        _ => PyOSError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

fn profile(name: &str) -> PyResult<Profile> {
    name.parse().map_err(py_err)
}

/// One layer's decomposition, in bits.
#[pyclass(name = "InfoState", frozen, from_py_object)]
#[derive(Clone)]
struct PyInfoState(pid::InfoState);

#[pymethods]
impl PyInfoState {
    #[new]
    fn new(layer: usize, r: f64, u_v: f64, u_l: f64, s: f64) -> Self {
        PyInfoState(pid::InfoState::new(layer, r, u_v, u_l, s))
    }
    #[getter]
    fn layer(&self) -> usize {
        self.0.layer
    }
    #[getter]
    fn r(&self) -> f64 {
        self.0.r
    }
    #[getter]
    fn u_v(&self) -> f64 {
        self.0.u_v
    }
    #[getter]
    fn u_l(&self) -> f64 {
        self.0.u_l
    }
    #[getter]
    fn s(&self) -> f64 {
        self.0.s
    }
    #[getter]
    fn total(&self) -> f64 {
        self.0.i_tot
    }
    #[getter]
    fn clamp_flags(&self) -> u8 {
        self.0.clamp_flags
    }
    /// Component shares of the total, as fractions.
    fn shares<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ShareRow::from_state(&self.0))
    }
    fn __repr__(&self) -> String {
        let s = &self.0;
        format!(
            "InfoState(layer={}, r={:.4}, u_v={:.4}, u_l={:.4}, s={:.4})",
            s.layer, s.r, s.u_v, s.u_l, s.s
        )
    }
}

/// A per-layer sequence of decompositions.
#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory(trajectory::Trajectory);

#[pymethods]
impl PyTrajectory {
    /// Loads a trajectory directory or CSV written by a run.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trajectory::load_trajectory(&path).map(PyTrajectory).map_err(py_err)
    }

    #[staticmethod]
    fn from_states(states: Vec<PyInfoState>) -> PyResult<Self> {
        let states = states.into_iter().map(|s| s.0).collect();
        trajectory::assemble_trajectory(states, Default::default())
            .map(PyTrajectory)
            .map_err(py_err)
    }

    #[getter]
    fn states(&self) -> Vec<PyInfoState> {
        self.0.states.iter().copied().map(PyInfoState).collect()
    }

    fn series(&self, component: &str) -> PyResult<Vec<f64>> {
        let c = pid::Component::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(component))
            .ok_or_else(|| PyValueError::new_err(format!("unknown component {component:?}")))?;
        Ok(self.0.series(c))
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    /// Mechanism label and evidence under default thresholds.
    fn classify<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rep = trajectory::classify_mechanism(&self.0, &ThresholdConfig::default()).map_err(py_err)?;
        to_py(py, &rep)
    }

    /// Fraction of the default threshold grid that agrees with the default label.
    fn sweep_stability(&self) -> PyResult<f64> {
        let s = trajectory::threshold_sweep(&self.0, &SweepGrid::around_defaults(), &ThresholdConfig::default())
            .map_err(py_err)?;
        Ok(s.stability)
    }

    fn __len__(&self) -> usize {
        self.0.states.len()
    }
}

/// Closed-form Gaussian PID of a covariance ordered (language, vision, target).
#[pyfunction]
fn decompose_covariance(cov: Vec<Vec<f64>>, d_l: usize, d_v: usize, d_y: usize) -> PyResult<PyInfoState> {
    let n = cov.len();
    if cov.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("covariance must be square"));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    let joint = JointGaussian::from_cov(d_l, d_v, d_y, m).map_err(py_err)?;
    pid::decompose_pid_mmi(&joint).map(PyInfoState).map_err(py_err)
}

/// Exact discrete PID of a canonical system: xor, and, copy or unique1.
#[pyfunction]
fn discrete_pid<'py>(py: Python<'py>, system: &str) -> PyResult<Bound<'py, PyAny>> {
    let sys = match system.to_ascii_lowercase().as_str() {
        "xor" => DiscreteSystem::Xor,
        "and" => DiscreteSystem::And,
        "copy" => DiscreteSystem::Copy,
        "unique1" => DiscreteSystem::Unique1,
        _ => return Err(PyValueError::new_err(format!("unknown system {system:?}"))),
    };
    to_py(py, &pid::discrete_pid_brute(&synth::gen_discrete_system(sys)))
}

/// Writes a synthetic store for a regime script. Returns the layer count.
#[pyfunction]
#[pyo3(signature = (script, out, seed = 42, samples = None))]
fn synth_store(py: Python<'_>, script: PathBuf, out: PathBuf, seed: u64, samples: Option<usize>) -> PyResult<usize> {
    py.detach(|| {
        let mut s = RegimeScript::load(&script)?;
        if let Some(n) = samples {
            s.samples = n;
        }
        store::write_store(&synth::gen_regime_dataset(&s, seed)?, &out)?;
        Ok(s.layers())
    })
    .map_err(py_err)
}

/// Lists format violations; an empty list means the store is valid.
#[pyfunction]
fn validate_store(path: PathBuf) -> Vec<String> {
    store::validate_store(&path).violations.iter().map(|v| v.to_string()).collect()
}

/// Runs the estimator and writes the run directory. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (baseline, out, knockout = None, profile = "test", seed = 42, steps = None))]
fn run<'py>(
    py: Python<'py>,
    baseline: PathBuf,
    out: PathBuf,
    knockout: Option<PathBuf>,
    profile: &str,
    seed: u64,
    steps: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = PipelineConfig::new(baseline, out, self::profile(profile)?);
    cfg.knockout = knockout;
    cfg.base_seed = seed;
    if let Some(steps) = steps {
        let mut flow = cfg.train_config();
        flow.steps = steps;
        cfg.flow = Some(flow);
    }
    let summary = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("output", summary.output.display().to_string())?;
    d.set_item("mechanism", summary.mechanism.as_ref().map(|m| m.label()))?;
    d.set_item("baseline", PyTrajectory(summary.baseline).into_pyobject(py)?)?;
    if let Some(k) = summary.knockout {
        d.set_item("knockout", PyTrajectory(k).into_pyobject(py)?)?;
    }
    if let Some(r) = &summary.knockout_report {
        d.set_item("knockout_report", to_py(py, r)?)?;
    }
    Ok(d.into_any())
}

/// Component-wise comparison of two trajectories.
#[pyfunction]
fn compare<'py>(py: Python<'py>, a: &PyTrajectory, b: &PyTrajectory) -> PyResult<Bound<'py, PyAny>> {
    let rep = compare_trajectories(&a.0, &b.0, &ThresholdConfig::default()).map_err(py_err)?;
    to_py(py, &rep)
}

/// Knockout deltas, predictions and dependence score.
#[pyfunction]
fn knockout<'py>(py: Python<'py>, base: &PyTrajectory, ko: &PyTrajectory) -> PyResult<Bound<'py, PyAny>> {
    let rep = knockout_deltas(&base.0, &ko.0).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("report", to_py(py, &rep)?)?;
    d.set_item("dep_score", dependence_score(&rep).ok().map(|s| s.percent))?;
    Ok(d.into_any())
}

/// Writes report files for a completed run; returns their paths.
#[pyfunction]
#[pyo3(signature = (run, format = "csv"))]
fn report(run: PathBuf, format: &str) -> PyResult<Vec<String>> {
    let f: ReportFormat = format.parse().map_err(py_err)?;
    let paths = pipeline::report(&run, f, None).map_err(py_err)?;
    Ok(paths.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn pidflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyInfoState>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(decompose_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_pid, m)?)?;
    m.add_function(wrap_pyfunction!(synth_store, m)?)?;
    m.add_function(wrap_pyfunction!(validate_store, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(knockout, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}

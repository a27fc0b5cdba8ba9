//! Python bindings: `import selforder_py`.
//!
//! Configurations cross the boundary as dicts (or JSON strings) with the
//! same fields as the CLI's `[model]` and `[solver]` tables. Arrays come
//! back as nested lists.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use selforder::dynamics::{self, SolverOptions, SteadyMethod, TrajectoryConfig};
use selforder::hilbert::DensityMatrix;
use selforder::model::{Model as CoreModel, ModelParams};
use selforder::observables as obs;
use selforder::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Accepts a JSON string or any object `json.dumps` can serialize.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Serializes through JSON into plain Python objects.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn solver_options(solver: Option<&Bound<'_, PyAny>>) -> PyResult<SolverOptions> {
    let opts: SolverOptions = solver.map(from_py).transpose()?.unwrap_or_default();
    opts.validate().map_err(py_err)?;
    Ok(opts)
}

fn rows<T: Clone>(a: &ndarray::Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// The cavity-particle model: couplings, Hamiltonian and jump operators.
#[pyclass(module = "selforder_py", frozen)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    fn new(params: &Bound<'_, PyAny>) -> PyResult<Self> {
        let p: ModelParams = from_py(params)?;
        Ok(Self { inner: CoreModel::build(&p).map_err(py_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn cutoffs(&self) -> Vec<usize> {
        self.inner.cutoffs()
    }

    #[getter]
    fn trap_modes(&self) -> Vec<usize> {
        self.inner.coupling.trap_modes.clone()
    }

    fn params(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.params)
    }

    /// `{"modes", "trap_modes", "A", "B", "energies"}` with one matrix per
    /// cavity mode.
    fn couplings(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let c = &self.inner.coupling;
        let value = serde_json::json!({
            "modes": c.modes,
            "trap_modes": c.trap_modes,
            "A": c.a.iter().map(rows).collect::<Vec<_>>(),
            "B": c.b.iter().map(rows).collect::<Vec<_>>(),
            "energies": c.energies,
        });
        to_py(py, &value)
    }

    /// Ground state of the lowest trap mode with every cavity mode empty.
    fn ground_vacuum(&self) -> State {
        State { inner: self.inner.ground_vacuum().to_density() }
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, cutoffs={:?})", self.inner.dim(), self.inner.cutoffs())
    }
}

/// A density matrix on a model's space.
#[pyclass(module = "selforder_py", frozen)]
struct State {
    inner: DensityMatrix,
}

#[pymethods]
impl State {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn trace(&self) -> Complex64 {
        self.inner.trace()
    }

    fn matrix(&self) -> Vec<Vec<Complex64>> {
        rows(self.inner.matrix())
    }

    /// `(⟨a⟩, ⟨n⟩, Var n)` of cavity mode `k` (position in the config).
    fn field_moments(&self, k: usize) -> PyResult<(Complex64, f64, f64)> {
        let m = obs::field_moments(&self.inner, k).map_err(py_err)?;
        Ok((m.mean_field, m.mean_n, m.var_n))
    }

    /// `(re_axis, im_axis, values)` with `values[i][j] = Q(re[i] + i·im[j])`.
    #[pyo3(signature = (k, alpha_max=None, points=obs::DEFAULT_Q_POINTS))]
    fn qfunction(&self, k: usize, alpha_max: Option<f64>, points: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        let q = match alpha_max {
            Some(a) => obs::qfunction(&self.inner, k, &obs::QGridSpec::new(a, points).map_err(py_err)?),
            None => obs::qfunction_auto(&self.inner, k),
        }
        .map_err(py_err)?;
        Ok((q.re.clone(), q.im.clone(), rows(&q.values)))
    }

    fn joint_photon(&self, a: usize, b: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&obs::joint_photon_dist(&self.inner, a, b).map_err(py_err)?))
    }

    /// Correlation coefficient of the photon numbers of modes `a` and `b`.
    fn photon_correlation(&self, a: usize, b: usize) -> PyResult<f64> {
        Ok(obs::photon_correlation(&obs::joint_photon_dist(&self.inner, a, b).map_err(py_err)?))
    }

    /// Best two-branch mixture: `(fidelity, alphas)`.
    fn mixture_fidelity(&self) -> PyResult<(f64, Vec<Complex64>)> {
        let fit = obs::mixture_fidelity(&self.inner).map_err(py_err)?;
        Ok((fit.fidelity, fit.alphas))
    }

    fn populations(&self, model: &Model) -> PyResult<Vec<f64>> {
        Ok(obs::reduced_particle_dm(&model.inner, &self.inner).map_err(py_err)?.populations())
    }

    fn density(&self, model: &Model, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        obs::position_density(&model.inner, &self.inner, &xs).map_err(py_err)
    }

    fn pair_density(&self, model: &Model, xs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&obs::pair_density(&model.inner, &self.inner, &xs).map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        format!("State(dim={})", self.inner.dim())
    }
}

/// Steady state and its solver report.
#[pyfunction]
#[pyo3(signature = (model, method="auto", solver=None))]
fn steady_state(py: Python<'_>, model: &Model, method: &str, solver: Option<&Bound<'_, PyAny>>) -> PyResult<(State, Py<PyAny>)> {
    let method: SteadyMethod =
        serde_json::from_value(serde_json::Value::String(method.into())).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let opts = solver_options(solver)?;
    let res = py.detach(|| dynamics::steady_state(&model.inner, &opts, method)).map_err(py_err)?;
    Ok((State { inner: res.rho }, to_py(py, &res.report)?))
}

/// Master-equation states at `times`, starting from `initial` (default:
/// ground state and vacuum).
#[pyfunction]
#[pyo3(signature = (model, times, initial=None, solver=None))]
fn evolve(
    py: Python<'_>,
    model: &Model,
    times: Vec<f64>,
    initial: Option<&State>,
    solver: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<State>> {
    let opts = solver_options(solver)?;
    let rho0 = initial.map_or_else(|| model.inner.ground_vacuum().to_density(), |s| s.inner.clone());
    let states = py
        .detach(|| dynamics::evolve_master(&model.inner.system, &rho0, &times, &opts))
        .map_err(py_err)?;
    Ok(states.into_iter().map(|inner| State { inner }).collect())
}

/// Trajectory ensemble from the ground state and vacuum. Returns
/// `(mean_n, std_err, averaged_state)` where `mean_n[s][k]` is the photon
/// number of mode `k` at `times[s]`.
#[pyfunction]
#[pyo3(signature = (model, times, solver=None, average_from=None))]
fn mcwf(
    py: Python<'_>,
    model: &Model,
    times: Vec<f64>,
    solver: Option<&Bound<'_, PyAny>>,
    average_from: Option<f64>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Option<State>)> {
    let opts = solver_options(solver)?;
    let m = &model.inner;
    let numbers = (0..m.n_cavity_modes())
        .map(|k| {
            let a = m.annihilation(k)?;
            Ok(a.adjoint().mul(&a)?.csr().into_owned())
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(py_err)?;
    let mut cfg = TrajectoryConfig::new(&times, &numbers);
    cfg.average_from = average_from;
    let ens = py
        .detach(|| dynamics::mcwf_ensemble(&m.system, &m.ground_vacuum(), &cfg, &opts, false))
        .map_err(py_err)?;
    Ok((ens.mean, ens.std_err, ens.averaged_state.map(|inner| State { inner })))
}

#[pymodule]
fn selforder_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<State>()?;
    m.add_function(wrap_pyfunction!(steady_state, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(mcwf, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

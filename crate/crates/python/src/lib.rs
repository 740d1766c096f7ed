//! Python bindings: models, the frozen Gaussian proxy, quasi-distances,
//! path simulation and the experiment runner.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use parametrix_core::config::ExperimentConfig;
use parametrix_core::flow::FlowSolver;
use parametrix_core::kernel::ProxyKernel as CoreKernel;
use parametrix_core::metric::QuasiMetricContext;
use parametrix_core::model::{catalog_names, model_by_name, ChainSpec, ModelDescriptor, SpaceTimePoint};
use parametrix_core::montecarlo::{simulate as core_simulate, Record, Scheme, SimulationPlan};
use parametrix_core::runner::run_checks;

fn py_err(e: parametrix_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A chain model from the catalog or from a JSON descriptor.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Model {
    spec: ChainSpec,
}

#[pymethods]
impl Model {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Model {
            spec: model_by_name(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(descriptor: &str) -> PyResult<Self> {
        let desc: ModelDescriptor = serde_json::from_str(descriptor).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Model {
            spec: ChainSpec::from_descriptor(&desc).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.spec.name.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.spec.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.spec.d
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn drift(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.spec.check_point(&x).map_err(py_err)?;
        Ok(self.spec.drift(t, &x).iter().copied().collect())
    }

    fn diffusion(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.spec.check_point(&x).map_err(py_err)?;
        Ok(rows_of(&self.spec.diffusion(t, &x)))
    }

    /// Deterministic flow of the drift from `(s, x)` to time `t`.
    fn flow(&self, t: f64, s: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let v = FlowSolver::new(&self.spec).flow(t, s, &x).map_err(py_err)?;
        Ok(v.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, n={}, d={})", self.spec.name, self.spec.n, self.spec.d)
    }
}

/// Gaussian proxy density frozen along the characteristic through the terminal point.
#[pyclass(frozen)]
struct ProxyKernel {
    inner: CoreKernel,
}

#[pymethods]
impl ProxyKernel {
    #[new]
    #[pyo3(signature = (model, steps_per_unit = 256))]
    fn new(model: &Model, steps_per_unit: usize) -> Self {
        ProxyKernel {
            inner: CoreKernel::with_solver(FlowSolver::with_steps(&model.spec, steps_per_unit)),
        }
    }

    fn density(&self, s: f64, t: f64, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.inner.density(s, t, &x, &y).map_err(py_err)
    }

    fn mean(&self, s: f64, t: f64, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = self.inner.at(s, t, &x, &y).map_err(py_err)?;
        Ok(g.mean().iter().copied().collect())
    }

    fn covariance(&self, s: f64, t: f64, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.at(s, t, &x, &y).map_err(py_err)?;
        Ok(rows_of(&g.covariance()))
    }
}

/// `d((s, x), (t, y))`: homogeneous norm of the gap to the flow started at `(s, x)`.
#[pyfunction]
#[pyo3(signature = (model, s, x, t, y, horizon = 1.0))]
fn quasi_distance(model: &Model, s: f64, x: Vec<f64>, t: f64, y: Vec<f64>, horizon: f64) -> PyResult<f64> {
    let ctx = QuasiMetricContext::new(&model.spec, horizon, 1.0).map_err(py_err)?;
    ctx.dist(&SpaceTimePoint::new(s, x), &SpaceTimePoint::new(t, y)).map_err(py_err)
}

/// Terminal states of `paths` simulated paths, one list per path.
#[pyfunction]
#[pyo3(signature = (model, start, horizon, steps, paths, seed = 0, scheme = "euler"))]
fn simulate(model: &Model, start: Vec<f64>, horizon: f64, steps: usize, paths: usize, seed: u64, scheme: &str) -> PyResult<Vec<Vec<f64>>> {
    let scheme = match scheme {
        "euler" => Scheme::Euler,
        "frozen" => Scheme::PiecewiseFrozen,
        other => return Err(PyValueError::new_err(format!("unknown scheme {other:?}; use \"euler\" or \"frozen\""))),
    };
    let plan = SimulationPlan::new(0.0, start, horizon, steps, paths, seed).recording(Record::Final);
    let ens = core_simulate(&model.spec, &plan, scheme).map_err(py_err)?;
    let last = ens.times.len() - 1;
    Ok((0..ens.paths()).map(|p| ens.state(p, last).to_vec()).collect())
}

/// Runs the suites of a JSON config; returns `(rows, failed)` with rows as dicts.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, config_json: &str) -> PyResult<(Vec<Bound<'py, PyDict>>, usize)> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let rows = py.detach(|| run_checks(&cfg)).map_err(py_err)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("suite", r.suite)?;
        d.set_item("check", r.check)?;
        d.set_item("statistic", r.statistic)?;
        d.set_item("value", r.value)?;
        d.set_item("bound", r.bound)?;
        d.set_item("pass", r.pass)?;
        d.set_item("sample_size", r.sample_size)?;
        d.set_item("seed", r.seed)?;
        d.set_item("wall_time", r.wall_time)?;
        out.push(d);
    }
    Ok((out, failed))
}

#[pyfunction]
fn catalog() -> Vec<&'static str> {
    catalog_names().to_vec()
}

#[pymodule]
pub fn parametrix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<ProxyKernel>()?;
    m.add_function(wrap_pyfunction!(quasi_distance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    Ok(())
}

//! Python bindings. Matrices cross the boundary as nested lists (row-major),
//! structured results as plain dicts.

use std::path::PathBuf;

use markov_admm::admm::{Admm, Engine, RunConfig};
use markov_admm::analysis::{self, kkt_certificate, theorem_constants};
use markov_admm::cli::{self, ExperimentConfig};
use markov_admm::graph::Graph;
use markov_admm::markov::{self, MarkovChain};
use markov_admm::objective::ProblemInstance;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
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
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(value).map_err(err)?)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn parse_engine(name: &str) -> PyResult<Engine> {
    match name {
        "sync" => Ok(Engine::Sync),
        "async" => Ok(Engine::Async),
        other => Err(err(format!("unknown engine {other:?}"))),
    }
}

/// Undirected connected graph with sorted edges.
#[pyclass(name = "Graph", frozen, module = "markov_admm")]
struct PyGraph {
    inner: Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(Self { inner: Graph::new(num_nodes, &edges).map_err(err)? })
    }

    #[staticmethod]
    fn path(n: usize) -> PyResult<Self> {
        Ok(Self { inner: Graph::path(n).map_err(err)? })
    }

    #[staticmethod]
    fn complete(n: usize) -> PyResult<Self> {
        Ok(Self { inner: Graph::complete(n).map_err(err)? })
    }

    #[staticmethod]
    fn star(n: usize) -> PyResult<Self> {
        Ok(Self { inner: Graph::star(n).map_err(err)? })
    }

    #[staticmethod]
    fn ring(n: usize) -> PyResult<Self> {
        Ok(Self { inner: Graph::ring(n).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, extra_edge_prob, seed))]
    fn random_connected(n: usize, extra_edge_prob: f64, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { inner: Graph::random_connected(n, extra_edge_prob, &mut rng).map_err(err)? })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    fn neighbors(&self, i: usize) -> PyResult<Vec<usize>> {
        if i >= self.inner.num_nodes() {
            return Err(err(format!("node {i} out of range")));
        }
        Ok(self.inner.neighbors(i).to_vec())
    }

    fn is_tree(&self) -> bool {
        self.inner.is_tree()
    }

    fn __repr__(&self) -> String {
        format!("Graph(num_nodes={}, num_edges={})", self.inner.num_nodes(), self.inner.num_edges())
    }
}

/// Finite Markov chain with its stationary distribution and mixing constants.
#[pyclass(name = "MarkovChain", frozen, module = "markov_admm")]
struct PyChain {
    inner: MarkovChain,
}

#[pymethods]
impl PyChain {
    #[staticmethod]
    #[pyo3(signature = (p, graph = None))]
    fn from_matrix(p: Vec<Vec<f64>>, graph: Option<&PyGraph>) -> PyResult<Self> {
        let inner = MarkovChain::from_matrix(matrix(&p)?, graph.map(|g| &g.inner)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random_walk(n: usize, alpha: f64) -> PyResult<Self> {
        Ok(Self { inner: markov::random_walk_chain(n, alpha).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (graph, target = None))]
    fn metropolis(graph: &PyGraph, target: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = markov::metropolis_hastings(&graph.inner, target.as_deref()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn geometric_profile(n: usize, alpha: f64) -> PyResult<Self> {
        Ok(Self { inner: markov::geometric_profile_chain(n, alpha).map_err(err)? })
    }

    #[getter]
    fn transition_matrix(&self) -> Vec<Vec<f64>> {
        rows(self.inner.transition_matrix())
    }

    #[getter]
    fn stationary(&self) -> Vec<f64> {
        self.inner.stationary().iter().copied().collect()
    }

    #[getter]
    fn period(&self) -> usize {
        self.inner.period()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings().to_vec()
    }

    /// `(b, gamma)` with `|P^k - 1πᵀ| <= b·gamma^k`.
    fn mixing(&self) -> PyResult<(f64, f64)> {
        let m = self.inner.mixing().map_err(err)?;
        Ok((m.b, m.gamma))
    }

    #[pyo3(signature = (initial_state, steps, seed))]
    fn simulate(&self, initial_state: usize, steps: usize, seed: u64) -> PyResult<Vec<usize>> {
        Ok(self.inner.simulate(initial_state, steps, seed).map_err(err)?.states)
    }

    fn __repr__(&self) -> String {
        format!(
            "MarkovChain(num_states={}, pi_min={:.4}, pi_max={:.4})",
            self.inner.num_states(),
            self.inner.pi_min(),
            self.inner.pi_max()
        )
    }
}

/// Sum of strongly convex local objectives over a graph.
#[pyclass(name = "Problem", frozen, module = "markov_admm")]
struct PyProblem {
    inner: ProblemInstance,
}

#[pymethods]
impl PyProblem {
    /// `f_i(x) = ½‖x - a_i‖²`.
    #[staticmethod]
    fn quadratic(graph: &PyGraph, targets: Vec<Vec<f64>>) -> PyResult<Self> {
        let targets = targets.into_iter().map(DVector::from_vec).collect();
        let inner = ProblemInstance::quadratic(graph.inner.clone(), targets).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn estimation(graph: &PyGraph, x_true: Vec<f64>, noise_std: f64, data_seed: u64) -> PyResult<Self> {
        let inner =
            ProblemInstance::estimation(graph.inner.clone(), &DVector::from_vec(x_true), noise_std, data_seed)
                .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.inner.nu()
    }

    #[getter]
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }

    fn centralized_solve(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.centralized_solve().map_err(err)?.iter().copied().collect())
    }

    /// Primal-dual optimum: `x_star`, `z_star`, `beta_star` and KKT residuals.
    fn kkt<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cert = kkt_certificate(&self.inner).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("x_star", cert.x_star.iter().copied().collect::<Vec<_>>())?;
        d.set_item("z_star", rows(&cert.z_star))?;
        d.set_item("beta_star", rows(&cert.beta_star))?;
        d.set_item("kkt_residuals", cert.kkt_residuals.to_vec())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Problem(num_nodes={}, dim={})", self.inner.num_nodes(), self.inner.dim())
    }
}

/// Single ADMM run; returns per-iteration metrics as lists plus the final iterate.
#[pyfunction]
#[pyo3(signature = (problem, engine = "async", rho = 1.0, iterations = 100, chain = None, seed = 0, initial_state = 0))]
fn run<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    engine: &str,
    rho: f64,
    iterations: usize,
    chain: Option<&PyChain>,
    seed: u64,
    initial_state: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let engine = parse_engine(engine)?;
    let admm = Admm::new(&problem.inner, rho).map_err(err)?;
    let cert = kkt_certificate(&problem.inner).map_err(err)?;
    let cfg = RunConfig { engine, rho, iterations, initial_state, seed };
    let rec = py
        .detach(|| admm.run(&cfg, chain.map(|c| &c.inner), &cert))
        .map_err(err)?;

    let d = PyDict::new(py);
    let col = |f: fn(&analysis::MetricsRow) -> f64| rec.metrics.iter().map(f).collect::<Vec<_>>();
    d.set_item("k", rec.metrics.iter().map(|r| r.k).collect::<Vec<_>>())?;
    d.set_item("g_err", col(|r| r.g_err))?;
    d.set_item("x_err", col(|r| r.x_err))?;
    d.set_item("obj_gap", col(|r| r.obj_gap))?;
    d.set_item("consensus_res", col(|r| r.consensus_res))?;
    d.set_item("x", rows(&rec.final_state.x))?;
    d.set_item("path", rec.path.map(|p| p.states))?;
    d.set_item("wall_time_secs", rec.wall_time_secs)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (problem, chain, rho = 1.0))]
fn constants<'py>(py: Python<'py>, problem: &PyProblem, chain: &PyChain, rho: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &theorem_constants(&problem.inner, rho, &chain.inner).map_err(err)?)
}

/// `(c, kappa)` maximizing the contraction margin.
#[pyfunction]
#[pyo3(signature = (problem, rho = 1.0))]
fn contraction_margin(problem: &PyProblem, rho: f64) -> PyResult<(f64, f64)> {
    analysis::contraction_margin(&problem.inner, rho).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (series, burn_in = 0))]
fn fit_linear_rate<'py>(py: Python<'py>, series: Vec<f64>, burn_in: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::fit_linear_rate(&series, burn_in).map_err(err)?)
}

#[pyfunction]
fn stationary_formula(n: usize, alpha: f64) -> PyResult<Vec<f64>> {
    markov::stationary_formula(n, alpha).map_err(err)
}

/// Runs a JSON experiment config; writes the output files when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir = None, base_dir = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_json: &str,
    out_dir: Option<PathBuf>,
    base_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json, base_dir.as_deref()).map_err(err)?;
    let bundle = py.detach(|| cli::run_experiment(&cfg)).map_err(err)?;
    if let Some(dir) = out_dir {
        cli::emit(&bundle, dir).map_err(err)?;
    }
    let out = to_py(py, &bundle)?;
    let engines = out.get_item("engines")?;
    for (i, e) in bundle.engines.iter().enumerate() {
        let entry = engines.get_item(i)?;
        entry.set_item("metrics", to_py(py, &e.metrics)?)?;
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "markov_admm")]
fn markov_admm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    m.add_function(wrap_pyfunction!(contraction_margin, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear_rate, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_formula, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

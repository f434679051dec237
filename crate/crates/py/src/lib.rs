//! Python bindings: instances, the repair model, training and the LNS loop.

use std::time::Duration;

use nlns_core::csp::{self, ProblemKind};
use nlns_core::destroy::{DestroyContext, DestroyOperator};
use nlns_core::io::{self as formats, Graph};
use nlns_core::lns::{self, LnsConfig};
use nlns_core::model::{self, ModelConfig, TrainConfig, Trainer};
use nlns_core::repair::RepairOperator;
use nlns_core::{Assignment, CspInstance, DestroyMask, Error, RepairModel};
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(nlns, ParseError, PyValueError, "Malformed instance or model file.");
create_exception!(nlns, ConfigError, PyValueError, "Invalid configuration value.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Parse { .. } | Error::Format(_) | Error::Unsupported(_) => ParseError::new_err(e.to_string()),
        Error::Config(_) | Error::Parameter(_) | Error::Capacity { .. } => ConfigError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::TrainingFault(_) => PyRuntimeError::new_err(e.to_string()),
        Error::Structural(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<ProblemKind> {
    match kind {
        "sudoku" => Ok(ProblemKind::Sudoku),
        "graph-coloring" | "coloring" => Ok(ProblemKind::GraphColoring),
        "max-cut" | "maxcut" => Ok(ProblemKind::MaxCut),
        _ => Err(ConfigError::new_err(format!("unknown problem kind `{kind}`"))),
    }
}

/// A constraint satisfaction instance.
#[pyclass(name = "Instance", module = "nlns", frozen, from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: CspInstance,
}

impl PyInstance {
    fn assignment(&self, values: Vec<usize>) -> PyResult<Assignment> {
        Assignment::new(&self.inner, values).map_err(py_err)
    }
}

#[pymethods]
impl PyInstance {
    /// One puzzle line: `side²` cells, `.` or `0` for blanks, optionally
    /// followed by a solution field.
    #[staticmethod]
    fn parse_sudoku(line: &str) -> PyResult<Self> {
        formats::parse_sudoku(line).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn parse_dimacs(text: &str, k: usize) -> PyResult<Self> {
        let g = formats::parse_dimacs_col(text).map_err(py_err)?;
        Self::build(&g, ProblemKind::GraphColoring, k)
    }

    #[staticmethod]
    fn parse_gset(text: &str) -> PyResult<Self> {
        let g = formats::parse_gset(text).map_err(py_err)?;
        Self::build(&g, ProblemKind::MaxCut, 2)
    }

    /// Graph instance from an edge list. `kind` is `graph-coloring` or `max-cut`.
    #[staticmethod]
    #[pyo3(signature = (n, edges, kind="graph-coloring", k=3))]
    fn from_edges(n: usize, edges: Vec<(usize, usize)>, kind: &str, k: usize) -> PyResult<Self> {
        let g = Graph::new(n, edges).map_err(py_err)?;
        let kind = parse_kind(kind)?;
        Self::build(&g, kind, if kind == ProblemKind::MaxCut { 2 } else { k })
    }

    /// Uniquely solvable puzzle with `givens` clues.
    #[staticmethod]
    #[pyo3(signature = (side=4, givens=8, seed=0))]
    fn generate_sudoku(side: usize, givens: usize, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        formats::gen_sudoku(side, givens, &mut rng).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Erdős–Rényi graph `G(n, p)`.
    #[staticmethod]
    #[pyo3(signature = (n, p, kind="graph-coloring", k=3, seed=0))]
    fn generate_graph(n: usize, p: f64, kind: &str, k: usize, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = formats::gen_random_graph(n, p, &mut rng).map_err(py_err)?;
        let kind = parse_kind(kind)?;
        Self::build(&g, kind, if kind == ProblemKind::MaxCut { 2 } else { k })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn domain_size(&self) -> usize {
        self.inner.domain_size()
    }

    #[getter]
    fn num_constraints(&self) -> usize {
        self.inner.constraints().len()
    }

    #[getter]
    fn givens(&self) -> Vec<Option<usize>> {
        self.inner.givens().to_vec()
    }

    #[getter]
    fn ground_truth(&self) -> Option<Vec<usize>> {
        self.inner.ground_truth().map(<[usize]>::to_vec)
    }

    /// Number of violated constraints.
    fn cost(&self, values: Vec<usize>) -> PyResult<usize> {
        let x = self.assignment(values)?;
        Ok(csp::cost(&self.inner, &x))
    }

    fn is_feasible(&self, values: Vec<usize>) -> PyResult<bool> {
        Ok(self.cost(values)? == 0)
    }

    fn cut_size(&self, values: Vec<usize>) -> PyResult<usize> {
        let x = self.assignment(values)?;
        Ok(csp::cut_size(&self.inner, &x))
    }

    /// Weighted penalty loss of the one-hot encoding.
    fn loss(&self, values: Vec<usize>) -> PyResult<f64> {
        let x = self.assignment(values)?;
        Ok(csp::discrete_report(&self.inner, &x).total_loss)
    }

    /// Per-variable L1 norm of the loss gradient at the one-hot encoding.
    fn violation_scores(&self, values: Vec<usize>) -> PyResult<Vec<f64>> {
        let x = self.assignment(values)?;
        Ok(nlns_core::diff::variable_violation_scores(&self.inner, &x))
    }

    #[pyo3(signature = (seed=0))]
    fn random_assignment(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        csp::random_assignment(&self.inner, &mut rng).into_inner()
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance(name={:?}, kind={}, n={}, d={}, constraints={})",
            self.inner.name,
            self.inner.kind.as_str(),
            self.inner.n(),
            self.inner.domain_size(),
            self.inner.constraints().len()
        )
    }
}

impl PyInstance {
    fn build(g: &Graph, kind: ProblemKind, k: usize) -> PyResult<Self> {
        formats::build_instance(g, kind, k).map(|inner| Self { inner }).map_err(py_err)
    }
}

/// Transformer repair model.
#[pyclass(name = "Model", module = "nlns")]
struct PyModel {
    inner: RepairModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_values, kind="sudoku", width=64, heads=4, blocks=2, max_len=256, seed=0))]
    fn new(num_values: usize, kind: &str, width: usize, heads: usize, blocks: usize, max_len: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::for_kind(parse_kind(kind)?, num_values);
        cfg.width = width;
        cfg.heads = heads;
        cfg.blocks = blocks;
        cfg.max_len = max_len;
        cfg.ff_width = 2 * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RepairModel::new(cfg, &mut rng).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        model::load_model_file(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_model_file(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_values(&self) -> usize {
        self.inner.config().num_values
    }

    /// Logits for every variable given the current values and the set of
    /// destroyed variable indices.
    fn forward(&self, instance: &PyInstance, values: Vec<usize>, destroyed: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let x = instance.assignment(values)?;
        let mut flags = vec![false; instance.inner.n()];
        for i in destroyed {
            *flags
                .get_mut(i)
                .ok_or_else(|| PyValueError::new_err(format!("variable {i} out of range")))? = true;
        }
        let mask = DestroyMask::new(&instance.inner, flags).map_err(py_err)?;
        let z = self.inner.forward(&instance.inner, &x, &mask).map_err(py_err)?;
        Ok(z.as_array().outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Self-supervised training; returns the per-step loss.
    #[pyo3(signature = (instances, steps=1000, lr=1e-3, batch=16, rho=0.3, tau=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        instances: Vec<PyInstance>,
        steps: usize,
        lr: f64,
        batch: usize,
        rho: f64,
        tau: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data: Vec<CspInstance> = instances.into_iter().map(|i| i.inner).collect();
        let cfg = TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            steps,
            tau,
            rho,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(self.inner.clone(), cfg).map_err(py_err)?;
        let losses = py.detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            trainer.fit(&data, &mut rng, |_, _| {})
        });
        let losses = losses.map_err(py_err)?;
        self.inner = trainer.into_model();
        Ok(losses)
    }
}

/// One destroy step; returns the selected variable indices.
#[pyfunction]
#[pyo3(signature = (instance, values, operator="random", rho=0.3, seed=0))]
fn destroy(instance: &PyInstance, values: Vec<usize>, operator: &str, rho: f64, seed: u64) -> PyResult<Vec<usize>> {
    let op: DestroyOperator = operator.parse().map_err(py_err)?;
    let x = instance.assignment(values)?;
    let report = csp::discrete_report(&instance.inner, &x);
    let ctx = DestroyContext {
        instance: &instance.inner,
        x: &x,
        rho,
        logits: None,
        report: &report,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op.apply(&ctx, &mut rng).map(|m| m.selected()).map_err(py_err)
}

/// Runs the LNS loop and returns its trajectory as a dict.
#[pyfunction]
#[pyo3(signature = (instance, model, destroy="random", repair="sample", rho=0.3, iterations=2000,
                    time_limit=None, tau=1.0, seed=0, stop_on_feasible=true))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    instance: &PyInstance,
    model: &PyModel,
    destroy: &str,
    repair: &str,
    rho: f64,
    iterations: Option<usize>,
    time_limit: Option<f64>,
    tau: f64,
    seed: u64,
    stop_on_feasible: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let time_limit = match time_limit {
        Some(t) if !(t > 0.0 && t.is_finite()) => return Err(ConfigError::new_err(format!("time limit {t} must be positive"))),
        t => t.map(Duration::from_secs_f64),
    };
    let cfg = LnsConfig {
        destroy: destroy.parse().map_err(py_err)?,
        repair: repair.parse::<RepairOperator>().map_err(py_err)?,
        rho,
        max_iterations: iterations,
        time_limit,
        tau,
        seed,
        stop_on_feasible,
    };
    let rec = py.detach(|| lns::lns_run(&instance.inner, &model.inner, &cfg)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("solved", rec.solved)?;
    out.set_item("iterations", rec.iterations)?;
    out.set_item("best_cost", rec.best_cost())?;
    out.set_item("initial_cost", rec.initial_cost())?;
    out.set_item("best_assignment", rec.best_assignment.values().to_vec())?;
    out.set_item("final_assignment", rec.final_assignment.values().to_vec())?;
    out.set_item("costs", rec.costs)?;
    out.set_item("best_costs", rec.best_costs)?;
    out.set_item("cell_accuracy", rec.cell_accuracy)?;
    out.set_item("cut_sizes", rec.cut_sizes)?;
    out.set_item("elapsed_ms", rec.elapsed_ms)?;
    Ok(out)
}

#[pyfunction]
fn destroy_operators() -> Vec<&'static str> {
    DestroyOperator::ALL.iter().map(|op| op.as_str()).collect()
}

#[pyfunction]
fn repair_operators() -> Vec<&'static str> {
    RepairOperator::ALL.iter().map(|op| op.as_str()).collect()
}

#[pymodule]
fn nlns(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(destroy, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(destroy_operators, m)?)?;
    m.add_function(wrap_pyfunction!(repair_operators, m)?)?;
    m.add("ParseError", m.py().get_type::<ParseError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    Ok(())
}

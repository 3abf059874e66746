//! Python bindings: experiment configs, training and refinement runs, seed
//! sweeps, probes and a few loss primitives.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vmt_core::autodiff::Tensor;
use vmt_core::data::gen_task;
use vmt_core::eval::{interpolation_grad_norms, time_loss_terms, MetricsRecord};
use vmt_core::harness::{config_to_toml, parse_config};
use vmt_core::losses::{kl_value, LossTermMask, MixupSite};
use vmt_core::nn::{init_params, save_checkpoint, Weights};
use vmt_core::rng::derive_seed;
use vmt_core::trainer::{self, ExperimentConfig, TrainState};

fn err(e: vmt_core::Error) -> PyErr {
    match e {
        vmt_core::Error::Config(_) | vmt_core::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

/// Experiment configuration. Construct from TOML text or take the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: parse_config(toml).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        config_to_toml(&self.inner).map_err(err)
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
    fn iterations(&self) -> u64 {
        self.inner.schedule.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: u64) {
        self.inner.schedule.iterations = n;
    }

    #[getter]
    fn site(&self) -> &'static str {
        self.inner.losses.site.name()
    }

    #[setter]
    fn set_site(&mut self, site: &str) -> PyResult<()> {
        self.inner.losses.site = site.parse::<MixupSite>().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn mask(&self) -> String {
        self.inner.losses.mask().to_string()
    }

    /// Loss terms such as `"Lc,Lv,Lm"` or `"none"`; keeps the current site.
    #[setter]
    fn set_mask(&mut self, mask: &str) -> PyResult<()> {
        let m: LossTermMask = mask.parse().map_err(err)?;
        let site = self.inner.losses.site;
        self.inner.losses.set_mask(LossTermMask { site, ..m });
        Ok(())
    }

    /// The same config with every regularizer and the domain term off.
    fn source_only(&self) -> Self {
        PyConfig {
            inner: self.inner.source_only(),
        }
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, mask={}, hash={})", self.inner.seed, self.mask(), &self.inner.hash()[..8])
    }
}

fn record_dict<'py>(py: Python<'py>, r: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", r.iteration)?;
    d.set_item("phase", r.phase.name())?;
    d.set_item("source_acc", r.source_acc)?;
    d.set_item("target_acc", r.target_acc)?;
    d.set_item("target_entropy", r.target_entropy)?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("total", r.total)?;
    for (name, v) in vmt_core::losses::LossComponents::NAMES.iter().zip(r.components.values()) {
        d.set_item(*name, v)?;
    }
    d.set_item("probe_mean", r.probe_mean)?;
    d.set_item("probe_max", r.probe_max)?;
    Ok(d)
}

/// Final state of a training or refinement run.
#[pyclass(name = "Run")]
struct PyRun {
    state: TrainState,
    config: ExperimentConfig,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn iteration(&self) -> u64 {
        self.state.iteration()
    }

    #[getter]
    fn status(&self) -> &'static str {
        self.state.status().name()
    }

    /// Evaluation snapshots as a list of dicts.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.state.history().iter().map(|r| record_dict(py, r)).collect()
    }

    #[getter]
    fn target_acc(&self) -> Option<f64> {
        self.state.last_record().map(|r| r.target_acc)
    }

    #[getter]
    fn source_acc(&self) -> Option<f64> {
        self.state.last_record().map(|r| r.source_acc)
    }

    /// Class probabilities of the EMA model for the given rows.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, _, probs) = vmt_core::nn::forward_classifier(&self.state.params, Weights::Shadow, &matrix(x)?).map_err(err)?;
        Ok((0..probs.rows()).map(|i| probs.row(i).to_vec()).collect())
    }

    /// `(mean, max)` of the interpolation gradient-norm probe on the target
    /// test split.
    fn probe(&self) -> PyResult<(f64, f64)> {
        let task = gen_task(&self.config.task_spec()).map_err(err)?;
        let g = interpolation_grad_norms(
            &self.state.params,
            Weights::Shadow,
            task.target.test.inputs(),
            &self.config.probe,
            self.config.seed,
        )
        .map_err(err)?;
        Ok((g.mean, g.max))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path.as_ref(), &self.state.to_checkpoint(&self.config.hash())).map_err(err)
    }
}

/// Joint training with the configured objective.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<PyRun> {
    let cfg = config.inner.clone();
    let state = py.detach(|| trainer::train_vmt(&cfg)).map_err(err)?;
    Ok(PyRun { state, config: cfg })
}

/// Target-only refinement of a finished run.
#[pyfunction]
fn refine(py: Python<'_>, run: &PyRun, config: &PyConfig) -> PyResult<PyRun> {
    let cfg = config.inner.clone();
    let init = run.state.clone();
    let state = py.detach(|| trainer::refine_dirt_t(&init, &cfg)).map_err(err)?;
    Ok(PyRun { state, config: cfg })
}

/// Runs every seed and returns the summary of final target accuracy plus
/// one dict per run.
#[pyfunction]
fn seed_sweep<'py>(py: Python<'py>, config: &PyConfig, seeds: Vec<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| trainer::seed_sweep(&cfg, &seeds)).map_err(err)?;
    let d = PyDict::new(py);
    let s = report.summary;
    d.set_item("completed", s.completed)?;
    d.set_item("failed", s.failed)?;
    d.set_item("mean", s.mean)?;
    d.set_item("std", s.std)?;
    d.set_item("min", s.min)?;
    d.set_item("max", s.max)?;
    d.set_item("median", s.median)?;
    let runs = report
        .runs
        .iter()
        .map(|r| {
            let rd = PyDict::new(py);
            rd.set_item("seed", r.seed)?;
            rd.set_item("status", r.status.name())?;
            rd.set_item("target_acc", r.last.as_ref().map(|m| m.target_acc))?;
            rd.set_item("error", r.error.clone())?;
            Ok(rd)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("runs", runs)?;
    Ok(d)
}

/// Source and target splits of the configured task as nested lists.
#[pyfunction]
fn generate_task<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let task = gen_task(&config.inner.task_spec()).map_err(err)?;
    let d = PyDict::new(py);
    for ds in [&task.source.train, &task.source.test, &task.target.train, &task.target.test] {
        let x: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.inputs().row(i).to_vec()).collect();
        let entry = PyDict::new(py);
        entry.set_item("x", x)?;
        entry.set_item("y", ds.labels().map(<[usize]>::to_vec))?;
        d.set_item(format!("{}_{}", ds.domain().name(), ds.split().name()), entry)?;
    }
    Ok(d)
}

/// Mean row-wise `KL(p || q)` of two probability matrices.
#[pyfunction]
fn kl_divergence(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    kl_value(&matrix(p)?, &matrix(q)?).map_err(err)
}

/// Mean seconds per forward+backward of the mixup and adversarial terms on
/// the initialized model.
#[pyfunction]
#[pyo3(signature = (config, repetitions = 100))]
fn time_loss_terms_py<'py>(py: Python<'py>, config: &PyConfig, repetitions: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let task = gen_task(&cfg.task_spec()).map_err(err)?;
    let params = init_params(&cfg.architecture().map_err(err)?, derive_seed(cfg.seed, "init")).map_err(err)?;
    let rows: Vec<usize> = (0..cfg.schedule.batch_size.min(task.target.train.len())).collect();
    let x = task.target.train.inputs().select_rows(&rows);
    let t = time_loss_terms(&params, &x, &cfg.losses, repetitions).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("repetitions", t.repetitions)?;
    d.set_item("vmt_seconds", t.vmt_seconds)?;
    d.set_item("vat_seconds", t.vat_seconds)?;
    Ok(d)
}

#[pymodule]
fn vmt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(seed_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add("time_loss_terms", wrap_pyfunction!(time_loss_terms_py, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use tcd_core::finetune::{self, FinetuneConfig, FinetuneMode, Task, TaskSpec};
use tcd_core::pipeline::corpus::{self, CorpusConfig};
use tcd_core::pipeline::{Checkpoint, Mode, RunConfig, Trainer};
use tcd_core::TcdError;

create_exception!(tcdlab, LabError, PyException);
create_exception!(tcdlab, CompatibilityError, LabError);

fn err(e: TcdError) -> PyErr {
    match e {
        TcdError::Compatibility(_) => CompatibilityError::new_err(e.to_string()),
        TcdError::Config(_) | TcdError::Contract(_) => PyValueError::new_err(e.to_string()),
        other => LabError::new_err(other.to_string()),
    }
}

/// Hands a serializable value to Python as plain dicts and lists.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| LabError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = TcdError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Synthetic corpus text, one sentence per line.
#[pyfunction]
#[pyo3(signature = (seed=0, tokens=200_000, shift="none"))]
fn generate_corpus(seed: u64, tokens: usize, shift: &str) -> PyResult<String> {
    Ok(corpus::generate(&CorpusConfig {
        seed,
        tokens,
        shift: parse(shift)?,
    }))
}

/// Chi-squared homogeneity test of two corpora's unigram counts.
#[pyfunction]
fn unigram_shift(py: Python<'_>, a: &str, b: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &corpus::unigram_shift(a, b).map_err(err)?)
}

#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses TOML; absent keys keep the reference defaults.
    #[new]
    #[pyo3(signature = (toml=""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(toml).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn parameter_count(&self, moe: bool) -> usize {
        self.inner.model.parameter_count(moe.then_some(&self.inner.moe))
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.model;
        format!(
            "RunConfig(hidden_dim={}, num_layers={}, num_experts={}, seed={})",
            m.hidden_dim, m.num_layers, self.inner.moe.num_experts, self.inner.train.seed
        )
    }
}

#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.progress.step
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.progress.epoch
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    fn parameter_count(&self) -> usize {
        self.inner.model.params().numel()
    }

    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.manifest())
    }

    /// Mean masked-LM log-likelihood of `corpus` (higher is better).
    #[pyo3(signature = (corpus, eval_seed=None))]
    fn ood_eval(&self, py: Python<'_>, corpus: &str, eval_seed: Option<u64>) -> PyResult<f64> {
        let seed = eval_seed.unwrap_or(self.inner.config.train.eval_seed);
        py.detach(|| finetune::ood_mlm_eval(&self.inner, corpus, seed)).map_err(err)
    }

    /// Fine-tunes on the task stored in `task_dir` and returns the result record.
    #[pyo3(signature = (task_dir, mode="full", lr=1e-3, epochs=10, batch_size=32, adapter_size=16, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &self,
        py: Python<'_>,
        task_dir: PathBuf,
        mode: &str,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        adapter_size: usize,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let mode = match mode {
            "full" => FinetuneMode::Full,
            "adapter" => FinetuneMode::Adapter,
            other => return Err(PyValueError::new_err(format!("unknown fine-tuning mode {other:?}"))),
        };
        let task = Task::load(&task_dir).map_err(err)?;
        let cfg = FinetuneConfig {
            mode,
            lr,
            epochs,
            batch_size,
            adapter_size,
            seed,
            ..FinetuneConfig::default()
        };
        let result = py.detach(|| finetune::finetune(&self.inner, &task, &cfg)).map_err(err)?;
        to_py(py, &result)
    }
}

/// Step-by-step pre-training driver.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, mode, corpus, teacher=None))]
    fn new(config: PyRunConfig, mode: &str, corpus: &str, teacher: Option<PathBuf>) -> PyResult<Self> {
        let teacher = teacher.as_deref().map(Checkpoint::load).transpose().map_err(err)?;
        Ok(Self {
            inner: Trainer::new(config.inner, parse::<Mode>(mode)?, corpus, teacher).map_err(err)?,
        })
    }

    /// One optimizer step; returns the logged loss record.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let rec = py.detach(|| self.inner.step()).map_err(err)?;
        to_py(py, &rec)
    }

    /// Validation masked-LM log-likelihood, if there is a validation split.
    fn validate(&self, py: Python<'_>) -> PyResult<Option<f64>> {
        py.detach(|| self.inner.validate()).map_err(err)
    }

    /// Trains to the end (or for `steps` more steps), writing metrics and
    /// checkpoints under `out`. Returns the checkpoint directories.
    #[pyo3(signature = (out, steps=None))]
    fn run(&mut self, py: Python<'_>, out: PathBuf, steps: Option<u64>) -> PyResult<Vec<PathBuf>> {
        let stop = steps.map(|s| self.inner.step_count() + s);
        let summary = py.detach(|| self.inner.run(&out, stop)).map_err(err)?;
        Ok(summary.checkpoints)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&dir).map_err(err)
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }
}

/// Writes a toy downstream task to `out` and returns its name.
#[pyfunction]
#[pyo3(signature = (out, task="presence", train_size=256, dev_size=128, max_tokens=28, seed=0))]
fn generate_task(out: PathBuf, task: &str, train_size: usize, dev_size: usize, max_tokens: usize, seed: u64) -> PyResult<String> {
    let t = finetune::generate_task(&TaskSpec {
        task: parse(task)?,
        train_size,
        dev_size,
        max_tokens,
        seed,
    })
    .map_err(err)?;
    t.save(&out).map_err(err)?;
    Ok(t.name)
}

#[pymodule]
fn tcdlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LabError", m.py().get_type::<LabError>())?;
    m.add("CompatibilityError", m.py().get_type::<CompatibilityError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(unigram_shift, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    Ok(())
}

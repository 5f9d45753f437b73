use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rmgpt_core::config::RunConfig;
use rmgpt_core::dataset::{generate_synthetic, load_manifest, SynthMode, SyntheticSpec, TaskKind, WindowSet};
use rmgpt_core::eval;
use rmgpt_core::model::{HeadSpec, RmGpt};
use rmgpt_core::numeric::{count_flops, rfft as core_rfft};
use rmgpt_core::tokenizer::PatchConfig;
use rmgpt_core::training::{checkpoint, run_phase, TrainMode};

mod convert;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_task(task: &str) -> PyResult<TaskKind> {
    match task {
        "diagnosis" => Ok(TaskKind::Diagnosis),
        "prognosis" => Ok(TaskKind::Prognosis),
        "unlabeled" => Ok(TaskKind::Unlabeled),
        other => Err(value_err(format!("unknown task `{other}`"))),
    }
}

fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Diagnosis => "diagnosis",
        TaskKind::Prognosis => "prognosis",
        TaskKind::Unlabeled => "unlabeled",
    }
}

/// An RmGPT model: parameters, per-dataset heads and the run config it was built from.
#[pyclass(name = "Model", module = "rmgpt")]
struct PyModel {
    inner: RmGpt,
    run: RunConfig,
}

#[pymethods]
impl PyModel {
    /// `config` is optional TOML layered over `preset`.
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0, config = None))]
    fn new(preset: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut run = match config {
            Some(text) => RunConfig::from_toml_str(text, preset).map_err(value_err)?,
            None => RunConfig::preset(preset).map_err(value_err)?,
        };
        run.train.seed = seed;
        run.validate(false).map_err(value_err)?;
        let inner = RmGpt::new(run.model.clone(), seed).map_err(value_err)?;
        Ok(Self { inner, run })
    }

    #[staticmethod]
    #[pyo3(signature = (path, preset = "desk"))]
    fn load(path: PathBuf, preset: &str) -> PyResult<Self> {
        let inner = checkpoint::load(&path).map_err(runtime_err)?;
        let mut run = RunConfig::preset(preset).map_err(value_err)?;
        run.model = inner.config.clone();
        run.train.seed = inner.seed;
        Ok(Self { inner, run })
    }

    /// Writes a checkpoint and returns its SHA-256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        checkpoint::save(&self.inner, &path).map_err(runtime_err)
    }

    fn config_toml(&self) -> String {
        self.run.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn add_head(&mut self, dataset: &str, task: &str, channels: usize, classes: usize) -> PyResult<()> {
        let spec = HeadSpec {
            dataset: dataset.to_string(),
            task: parse_task(task)?,
            channels,
            classes,
        };
        self.inner.add_head(spec).map_err(value_err)
    }

    fn heads<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .heads
            .values()
            .map(|h| {
                let d = PyDict::new(py);
                d.set_item("dataset", &h.dataset)?;
                d.set_item("task", task_name(h.task))?;
                d.set_item("channels", h.channels)?;
                d.set_item("classes", h.classes)?;
                Ok(d)
            })
            .collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.store.iter().map(|(n, _, _)| n.to_string()).collect()
    }

    /// `(shape, flat values)` of one named parameter.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.param(name).map_err(value_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn total_params(&self) -> usize {
        self.inner.store.total_count()
    }

    fn trainable_params(&self, mode: &str) -> PyResult<usize> {
        let mode: TrainMode = mode.parse().map_err(value_err)?;
        Ok(self.inner.store.trainable_count(mode))
    }

    /// Health tokens `[B][M][d]` for windows given as `[B][L][M]`.
    fn health_tokens(&self, py: Python<'_>, dataset: &str, windows: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let ws = convert::windows_from_nested(windows).map_err(value_err)?;
        let refs: Vec<_> = ws.iter().collect();
        let out = py.detach(|| self.inner.health_tokens(dataset, &refs, 32)).map_err(value_err)?;
        Ok(out.iter().map(convert::rows).collect())
    }

    fn diagnose(&self, py: Python<'_>, dataset: &str, windows: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<usize>> {
        let ws = convert::windows_from_nested(windows).map_err(value_err)?;
        let refs: Vec<_> = ws.iter().collect();
        py.detach(|| self.inner.diagnose(dataset, &refs)).map_err(value_err)
    }

    fn predict_rul(&self, py: Python<'_>, dataset: &str, windows: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<f64>> {
        let ws = convert::windows_from_nested(windows).map_err(value_err)?;
        let refs: Vec<_> = ws.iter().collect();
        py.detach(|| self.inner.predict_rul(dataset, &refs)).map_err(value_err)
    }

    /// Counted forward flops for one window with `channels` channels.
    #[pyo3(signature = (channels, batch = 1))]
    fn flops<'py>(&self, py: Python<'py>, channels: usize, batch: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = count_flops(&self.inner.config.flop_shape(batch, channels));
        let d = PyDict::new(py);
        d.set_item("total", r.total)?;
        d.set_item("score_macs", r.score_macs)?;
        d.set_item("by_module", r.by_module.clone())?;
        d.set_item("by_class", r.by_class.clone())?;
        Ok(d)
    }

    /// Trains on the given manifests and returns per-epoch mean losses.
    ///
    /// `mode` is `pretrain`, `prompt` or `finetune`; pretraining ignores labels.
    #[pyo3(signature = (manifests, mode, epochs = None, learning_rate = None, seed = None))]
    fn train(&mut self, py: Python<'_>, manifests: Vec<PathBuf>, mode: &str, epochs: Option<usize>, learning_rate: Option<f64>, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let mode: TrainMode = mode.parse().map_err(value_err)?;
        let mut cfg = self.run.train.clone();
        if let Some(e) = epochs {
            match mode {
                TrainMode::Pretrain => cfg.pretrain_epochs = e,
                TrainMode::Prompt => cfg.prompt_epochs = e,
                TrainMode::Finetune => cfg.finetune_epochs = e,
            }
        }
        if let Some(lr) = learning_rate {
            cfg.learning_rate = lr;
            cfg.prompt_learning_rate = Some(lr);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let sets = load_sets(&self.run, &manifests, mode == TrainMode::Pretrain)?;
        let refs: Vec<&WindowSet> = sets.iter().collect();
        let hash = self.run.hash();
        let model = &mut self.inner;
        let log = py.detach(|| run_phase(model, &refs, &cfg, mode, &hash)).map_err(runtime_err)?;
        Ok(log.epochs.iter().map(|e| e.mean_loss).collect())
    }

    /// Accuracy (diagnosis) or MAE/MSE (prognosis) over every window of a manifest.
    fn evaluate<'py>(&self, py: Python<'py>, manifest: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let set = load_sets(&self.run, &[manifest], false)?.remove(0);
        let r = py.detach(|| eval::evaluate(&self.inner, &set)).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("dataset", &r.dataset)?;
        d.set_item("samples", r.samples)?;
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("mae", r.mae)?;
        d.set_item("mse", r.mse)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(d_model={}, layers={}, heads={}, params={}, datasets={})", c.d_model, c.layers, c.heads, self.inner.store.total_count(), self.inner.heads.len())
    }
}

fn load_sets(run: &RunConfig, manifests: &[PathBuf], unlabeled: bool) -> PyResult<Vec<WindowSet>> {
    manifests
        .iter()
        .map(|p| {
            let m = load_manifest(p).map_err(value_err)?;
            let mut set = WindowSet::load(&m, &run.window()).map_err(value_err)?;
            if unlabeled {
                set.task = TaskKind::Unlabeled;
                set.classes = 0;
                set.windows.iter_mut().for_each(|w| w.target = rmgpt_core::dataset::Target::Unlabeled);
            }
            Ok(set)
        })
        .collect()
}

/// Writes a synthetic dataset into `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, kind = "diagnosis", n = 10, seed = 0, name = "synthetic", channels = 2, life_steps = 40))]
fn synthesize(out_dir: PathBuf, kind: &str, n: usize, seed: u64, name: &str, channels: usize, life_steps: usize) -> PyResult<PathBuf> {
    let mode = match kind {
        "diagnosis" => SynthMode::Diagnosis,
        "prognosis" => SynthMode::Prognosis,
        other => return Err(value_err(format!("unknown kind `{other}`"))),
    };
    let spec = SyntheticSpec {
        name: name.to_string(),
        mode,
        channels,
        life_steps,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec, n).map_err(value_err)?;
    data.write_to(&out_dir).map_err(runtime_err)?;
    Ok(out_dir.join("manifest.toml"))
}

/// Number of signal tokens per channel for a window of `window_len`.
#[pyfunction]
fn signal_token_count(window_len: usize, patch_len: usize, stride: usize) -> PyResult<usize> {
    Ok(PatchConfig::new(patch_len, stride, window_len).map_err(value_err)?.signal_len())
}

/// Magnitude and phase of the real FFT of a power-of-two-length signal.
#[pyfunction]
fn rfft(x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = core_rfft(&x).map_err(value_err)?;
    Ok((s.magnitude, s.phase))
}

/// SHA-256 of a checkpoint file.
#[pyfunction]
fn checkpoint_hash(path: PathBuf) -> PyResult<String> {
    checkpoint::file_hash(Path::new(&path)).map_err(runtime_err)
}

#[pymodule]
fn rmgpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(signal_token_count, m)?)?;
    m.add_function(wrap_pyfunction!(rfft, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_hash, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

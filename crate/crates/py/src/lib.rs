//! Python bindings: corpora, the trainer, checkpoints, probes, and the NCE
//! losses. Configs cross the boundary as JSON text; reports come back as
//! Python dicts.

use std::path::PathBuf;

use cbt_core::checkpoint::{Checkpoint, CheckpointKind};
use cbt_core::graph::Graph;
use cbt_core::losses::{in_batch_nce, visual_nce, Anchor, NceBatchView, NceOptions};
use cbt_core::model::{retrieval_eval, visual_features, ModelConfig};
use cbt_core::probes::{train_probe, ProbeConfig, ProbeData};
use cbt_core::synthdata::{generate, Corpus, CorpusSpec, LabeledSequence};
use cbt_core::tensor::Tensor;
use cbt_core::trainer::{TrainConfig, Trainer};
use cbt_core::CbtError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: CbtError) -> PyErr {
    match e {
        CbtError::Config(_) | CbtError::Json(_) | CbtError::Shape(_) | CbtError::Data(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[pyclass(name = "Corpus", module = "cbt", skip_from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Generates a corpus from a JSON spec (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn generate(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: CorpusSpec = parse(spec_json)?;
        Ok(Self {
            inner: generate(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Corpus::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn spec_json(&self) -> PyResult<String> {
        self.inner.spec.to_canonical_json().map_err(err)
    }

    /// `(train, test)` with the test share taken from the end.
    fn split(&self, test_fraction: f64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split(test_fraction).map_err(err)?;
        let part = |s: &[LabeledSequence]| Self {
            inner: Corpus {
                spec: self.inner.spec.clone(),
                sequences: s.to_vec(),
            },
        };
        Ok((part(a), part(b)))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// One sequence as a dict of plain lists.
    fn sequence<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let doc = serde_json::json!({
            "x": rows(s.x.values()),
            "pad_mask": s.x.pad_mask(),
            "y": s.y.ids(),
            "latents": s.latents,
            "seq_label": s.seq_label,
            "next_label": s.next_label,
        });
        to_py(py, &doc)
    }
}

#[pyclass(name = "Trainer", module = "cbt")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model_json=None, train_json=None))]
    fn new(model_json: Option<&str>, train_json: Option<&str>) -> PyResult<Self> {
        let model: ModelConfig = parse(model_json)?;
        let train: TrainConfig = parse(train_json)?;
        Ok(Self {
            inner: Trainer::new(model, train).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: ck.into_trainer().map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_trainer(&self.inner, None, CheckpointKind::Regular)
            .save(&path)
            .map_err(err)
    }

    /// Completed main-phase steps.
    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step
    }

    /// One optimizer step; `None` once the budget is spent.
    fn step<'py>(&mut self, py: Python<'py>, corpus: &PyCorpus) -> PyResult<Option<Bound<'py, PyAny>>> {
        match self.inner.step(&corpus.inner.sequences).map_err(err)? {
            Some(r) => Ok(Some(to_py(py, &r)?)),
            None => Ok(None),
        }
    }

    /// Runs to the configured budget and returns every step report.
    fn run<'py>(&mut self, py: Python<'py>, corpus: &PyCorpus) -> PyResult<Bound<'py, PyAny>> {
        let mut reports = Vec::new();
        self.inner
            .run(&corpus.inner.sequences, |_, r| {
                reports.push(*r);
                Ok(())
            })
            .map_err(err)?;
        to_py(py, &reports)
    }

    /// Unmasked contextual features of one sequence, `T x D`.
    fn features(&self, corpus: &PyCorpus, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = corpus
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok(rows(&visual_features(&self.inner.store, &self.inner.model, &s.x).map_err(err)?))
    }

    /// Mean `group`-way retrieval accuracy over consecutive groups.
    #[pyo3(signature = (corpus, group=16))]
    fn retrieval(&self, corpus: &PyCorpus, group: usize) -> PyResult<f64> {
        retrieval_eval(&self.inner.store, &self.inner.model, &corpus.inner.sequences, group).map_err(err)
    }

    /// Trains a probe on `train` and reports accuracy on `test`.
    #[pyo3(signature = (train, test, probe_json=None))]
    fn probe<'py>(
        &self,
        py: Python<'py>,
        train: &PyCorpus,
        test: &PyCorpus,
        probe_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: ProbeConfig = parse(probe_json)?;
        let data = ProbeData {
            train: &train.inner.sequences,
            test: &test.inner.sequences,
            num_classes: train.inner.spec.num_latent_classes,
        };
        let out = train_probe(data, &self.inner.store, &self.inner.model, &cfg).map_err(err)?;
        to_py(py, &out.report)
    }
}

/// Visual NCE for explicit predictions, candidate pool, and per-anchor
/// negatives (indices into `pool`); anchor `i` targets pool row `targets[i]`.
#[pyfunction]
#[pyo3(signature = (predictions, pool, targets, negatives, temperature=1.0, normalize=false))]
fn visual_nce_loss(
    predictions: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
    targets: Vec<usize>,
    negatives: Vec<Vec<usize>>,
    temperature: f64,
    normalize: bool,
) -> PyResult<f64> {
    let slots = (0..pool.len()).map(|j| (0, j)).collect();
    let anchors = targets
        .iter()
        .map(|&t| Anchor {
            seq: 0,
            pos: t,
            pool_index: t,
        })
        .collect();
    let view = NceBatchView::from_parts(slots, anchors, negatives).map_err(err)?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(&predictions).map_err(err)?);
    let e = g.constant(Tensor::from_rows(&pool).map_err(err)?);
    let opts = NceOptions { temperature, normalize };
    let loss = visual_nce(&mut g, &view, p, e, &opts).map_err(err)?;
    Ok(g.value(loss).item())
}

/// In-batch cross-modal NCE over a square score matrix (diagonal positive).
#[pyfunction]
fn cross_modal_nce_loss(scores: Vec<Vec<f64>>) -> PyResult<f64> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::from_rows(&scores).map_err(err)?);
    let loss = in_batch_nce(&mut g, s).map_err(err)?;
    Ok(g.value(loss).item())
}

#[pymodule]
pub fn cbt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(visual_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_modal_nce_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings for the pathlm toolkit.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

use pathlm::corpus::{self, CorpusSplit, DiagnosisElement};
use pathlm::encoder::checkpoint::{self, CheckpointHeader};
use pathlm::encoder::{EncoderConfig, ModelWeights};
use pathlm::evaluation;
use pathlm::synthcorpus::{generate, TemplateSpec};
use pathlm::training::{self, FinetuneConfig, PretrainConfig};
use pathlm::wordpiece::{self, TrainerConfig};
use pathlm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::GradientOverflow(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
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
            let items = items.iter().map(|x| value_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, value_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(x).map_err(|e| PyValueError::new_err(e.to_string()))?;
    value_to_py(py, &v)
}

fn elements_of(texts: &[String], labels: Option<&[Vec<String>]>) -> PyResult<Vec<DiagnosisElement>> {
    if let Some(l) = labels {
        if l.len() != texts.len() {
            return Err(PyValueError::new_err(format!(
                "{} label lists for {} texts",
                l.len(),
                texts.len()
            )));
        }
    }
    Ok(texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let l = labels.map(|l| l[i].iter().cloned().collect::<BTreeSet<_>>());
            DiagnosisElement::new(format!("py-{i}"), format!("py-{i}"), corpus::normalize(t), l)
        })
        .collect())
}

/// A WordPiece vocabulary.
#[pyclass(name = "Vocabulary", module = "pathlm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: wordpiece::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Trains a vocabulary on normalized texts.
    #[staticmethod]
    #[pyo3(signature = (texts, vocab_size = 13000, min_frequency = 2))]
    fn train(texts: Vec<String>, vocab_size: usize, min_frequency: u64) -> PyResult<Self> {
        let cfg = TrainerConfig {
            vocab_size,
            min_frequency,
        };
        let inner = wordpiece::train_vocab(texts.iter(), &cfg).map_err(py_err)?;
        Ok(PyVocabulary { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, foreign = false))]
    fn load(path: PathBuf, foreign: bool) -> PyResult<Self> {
        let inner = if foreign {
            wordpiece::Vocabulary::load_foreign(&path)
        } else {
            wordpiece::Vocabulary::load(&path)
        };
        Ok(PyVocabulary {
            inner: inner.map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        wordpiece::tokenize(text, &self.inner).pieces
    }

    /// `[CLS] ids [SEP]`, truncated to `max_len`.
    #[pyo3(signature = (text, max_len = 64))]
    fn encode(&self, text: &str, max_len: usize) -> PyResult<Vec<u32>> {
        if max_len < 3 {
            return Err(PyValueError::new_err("max_len must be at least 3"));
        }
        Ok(wordpiece::encode_unpadded(text, &self.inner, max_len))
    }

    fn id_of(&self, token: &str) -> Option<u32> {
        self.inner.id_of(token)
    }

    fn token_of(&self, id: u32) -> Option<String> {
        self.inner.token_of(id).map(str::to_string)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(len={})", self.inner.len())
    }
}

/// Encoder weights, optionally with a classification head and its label names.
#[pyclass(name = "Model", module = "pathlm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    weights: ModelWeights<f32>,
    labels: Vec<String>,
    step: u64,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized encoder; dimensions default to the desk-scale model.
    #[staticmethod]
    #[pyo3(signature = (vocab_size, seed = 42, n_layers = 2, hidden_dim = 64, n_heads = 2, ff_dim = 256, max_seq_len = 64, dropout_rate = 0.1))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        vocab_size: usize,
        seed: u64,
        n_layers: usize,
        hidden_dim: usize,
        n_heads: usize,
        ff_dim: usize,
        max_seq_len: usize,
        dropout_rate: f64,
    ) -> PyResult<Self> {
        let config = EncoderConfig {
            n_layers,
            hidden_dim,
            n_heads,
            ff_dim,
            max_seq_len,
            vocab_size,
            dropout_rate,
            n_labels: 0,
        };
        Ok(PyModel {
            weights: ModelWeights::init(config, seed).map_err(py_err)?,
            labels: Vec::new(),
            step: 0,
        })
    }

    /// Loads a checkpoint, checking it against `vocab` when given.
    #[staticmethod]
    #[pyo3(signature = (path, vocab = None))]
    fn load(path: PathBuf, vocab: Option<&PyVocabulary>) -> PyResult<Self> {
        let ck = checkpoint::load(&path, vocab.map(|v| &v.inner)).map_err(py_err)?;
        Ok(PyModel {
            weights: ck.weights,
            labels: ck.header.labels,
            step: ck.header.step,
        })
    }

    fn save(&self, path: PathBuf, vocab: &PyVocabulary) -> PyResult<()> {
        let header = CheckpointHeader {
            config: self.weights.config,
            vocab_hash: vocab.inner.content_hash(),
            step: self.step,
            labels: self.labels.clone(),
        };
        checkpoint::save(&path, &self.weights, &header).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.weights.config)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    fn n_params(&self) -> usize {
        self.weights.n_params()
    }

    /// Top predictions for sentences with one `[MASK]` marker each. Returns
    /// dicts with `sentence`, `predictions` ([token, probability] pairs) and `error`.
    #[pyo3(signature = (sentences, vocab, top_n = 3))]
    fn fill_mask<'py>(
        &self,
        py: Python<'py>,
        sentences: Vec<String>,
        vocab: &PyVocabulary,
        top_n: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
        let rows = py
            .detach(|| evaluation::dump_inferences(&self.weights, &refs, &vocab.inner, top_n))
            .map_err(py_err)?;
        to_py(py, &rows)
    }

    /// Per-label sigmoid probabilities, in head order.
    fn predict_probabilities(
        &self,
        py: Python<'_>,
        texts: Vec<String>,
        vocab: &PyVocabulary,
    ) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        py.detach(|| training::predict_probabilities(&self.weights, &refs, &vocab.inner))
            .map_err(py_err)
    }

    /// Label sets asserted at `threshold`.
    #[pyo3(signature = (texts, vocab, threshold = 0.5))]
    fn predict_labels(
        &self,
        py: Python<'_>,
        texts: Vec<String>,
        vocab: &PyVocabulary,
        threshold: f64,
    ) -> PyResult<Vec<Vec<String>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let rows = py
            .detach(|| training::predict_labels(&self.weights, &self.labels, &refs, &vocab.inner, threshold))
            .map_err(py_err)?;
        Ok(rows.into_iter().map(|p| p.labels.into_iter().collect()).collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.weights.config;
        format!(
            "Model(layers={}, hidden={}, vocab={}, labels={})",
            c.n_layers,
            c.hidden_dim,
            c.vocab_size,
            self.labels.len()
        )
    }
}

/// Lowercases, strips punctuation and collapses whitespace.
#[pyfunction]
fn normalize(text: &str) -> String {
    corpus::normalize(text)
}

/// Parses report JSONL text and returns diagnosis elements as dicts.
#[pyfunction]
#[pyo3(signature = (jsonl, section = "DIAGNOSIS"))]
fn preprocess<'py>(py: Python<'py>, jsonl: &str, section: &str) -> PyResult<Bound<'py, PyAny>> {
    let ingested = corpus::ingest_jsonl_str(jsonl);
    to_py(py, &corpus::preprocess(&ingested.reports, section))
}

/// Synthetic reports from the bundled template spec, as dicts.
#[pyfunction]
#[pyo3(signature = (n_reports = None, seed = None, deterministic = false))]
fn synth_reports<'py>(
    py: Python<'py>,
    n_reports: Option<usize>,
    seed: Option<u64>,
    deterministic: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = TemplateSpec::bundled();
    if let Some(n) = n_reports {
        spec.n_reports = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if deterministic {
        spec = spec.deterministic();
    }
    let reports = py.detach(|| generate(&spec)).map_err(py_err)?;
    to_py(py, &reports)
}

/// Share of unique words at or above each frequency threshold that are whole
/// vocabulary tokens.
#[pyfunction]
#[pyo3(signature = (texts, vocab, thresholds = vec![1, 2, 5, 10]))]
fn word_coverage<'py>(
    py: Python<'py>,
    texts: Vec<String>,
    vocab: &PyVocabulary,
    thresholds: Vec<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &pathlm::coverage::word_coverage(texts.iter(), &vocab.inner, &thresholds),
    )
}

/// Masked-LM pretraining. Returns the trained model and the log rows.
#[pyfunction]
#[pyo3(signature = (model, train_texts, vocab, validation_texts = None, steps = 1000, lr = 1e-3, batch_size = 32, mask_rate = 0.15, eval_every = 0, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn pretrain<'py>(
    py: Python<'py>,
    model: &PyModel,
    train_texts: Vec<String>,
    vocab: &PyVocabulary,
    validation_texts: Option<Vec<String>>,
    steps: usize,
    lr: f64,
    batch_size: usize,
    mask_rate: f64,
    eval_every: usize,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let split = CorpusSplit {
        train: elements_of(&train_texts, None)?,
        validation: elements_of(&validation_texts.unwrap_or_default(), None)?,
        test: Vec::new(),
        seed,
    };
    let cfg = PretrainConfig {
        total_steps: steps,
        lr,
        batch_size,
        mask_rate,
        eval_every,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    let weights = model.weights.clone();
    let out = py
        .detach(|| training::pretrain_from(weights, &split, &vocab.inner, &cfg, None))
        .map_err(py_err)?;
    let log = to_py(py, &out.log)?;
    let trained = PyModel {
        weights: out.weights,
        labels: Vec::new(),
        step: model.step + steps as u64,
    };
    Ok((trained, log))
}

/// Multi-label fine-tuning with early stopping on development micro-F1.
/// Returns the best-epoch model and the per-epoch log.
#[pyfunction]
#[pyo3(signature = (model, texts, labels, vocab, dev_texts = None, dev_labels = None, label_names = None, epochs = 6, lr = 2e-5, batch_size = 32, dropout = 0.2, patience = 10, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn finetune<'py>(
    py: Python<'py>,
    model: &PyModel,
    texts: Vec<String>,
    labels: Vec<Vec<String>>,
    vocab: &PyVocabulary,
    dev_texts: Option<Vec<String>>,
    dev_labels: Option<Vec<Vec<String>>>,
    label_names: Option<Vec<String>>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    dropout: f64,
    patience: usize,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let train = elements_of(&texts, Some(&labels))?;
    let dev = match (dev_texts, dev_labels) {
        (Some(t), Some(l)) => Some(elements_of(&t, Some(&l))?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("dev_texts and dev_labels go together")),
    };
    let cfg = FinetuneConfig {
        labels: label_names.unwrap_or_else(training::default_labels),
        epochs,
        lr,
        batch_size,
        dropout,
        patience,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    let out = py
        .detach(|| training::finetune(&model.weights, &train, dev.as_deref(), &vocab.inner, &cfg))
        .map_err(py_err)?;
    let epochs_log = to_py(py, &out.epochs)?;
    let tuned = PyModel {
        weights: out.weights,
        labels: cfg.labels,
        step: model.step,
    };
    Ok((tuned, epochs_log))
}

/// Masked prediction accuracy per mask rate.
#[pyfunction]
#[pyo3(signature = (model, texts, vocab, mask_rates = vec![0.15, 0.30, 0.45, 0.60, 0.75], k = 5, seed = 42))]
fn eval_mlm<'py>(
    py: Python<'py>,
    model: &PyModel,
    texts: Vec<String>,
    vocab: &PyVocabulary,
    mask_rates: Vec<f64>,
    k: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let elements = elements_of(&texts, None)?;
    let report = py
        .detach(|| evaluation::eval_mlm(&model.weights, &elements, &vocab.inner, &mask_rates, k, seed))
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Per-label and micro metrics with bootstrap intervals.
#[pyfunction]
#[pyo3(signature = (predicted, truth, labels, n_bootstrap = 1000, ci = 0.95, seed = 42))]
fn eval_classification<'py>(
    py: Python<'py>,
    predicted: Vec<Vec<String>>,
    truth: Vec<Vec<String>>,
    labels: Vec<String>,
    n_bootstrap: usize,
    ci: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let sets = |rows: Vec<Vec<String>>| -> Vec<BTreeSet<String>> {
        rows.into_iter().map(|r| r.into_iter().collect()).collect()
    };
    let report = evaluation::eval_classification(&sets(predicted), &sets(truth), &labels, n_bootstrap, ci, seed)
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Whether `target` is among the `k` highest logits (ties by lower id).
#[pyfunction]
fn top_k_hit(logits: Vec<f32>, target: u32, k: usize) -> bool {
    evaluation::top_k_hit(&logits, target, k)
}

#[pymodule]
fn pathlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(synth_reports, m)?)?;
    m.add_function(wrap_pyfunction!(word_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(eval_mlm, m)?)?;
    m.add_function(wrap_pyfunction!(eval_classification, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_hit, m)?)?;
    m.add("DEFAULT_LABELS", training::default_labels())?;
    Ok(())
}

//! Python bindings for entity normalization with the edge-weight objective.
//!
//! Records cross the boundary as `(surface, [concept_id, ...])` tuples and
//! pairs as `(entity_a, entity_b, label)` tuples.

use std::path::PathBuf;

use ewun::corpus::{
    self, ConceptDictionary, EntityRecord, PairRecord, Split, SurfaceNormalization,
};
use ewun::encoder::{self as enc, EncoderHandle};
use ewun::trainer::{self, CheckpointPolicy, TrainConfig, TrainData};
use ewun::{checkpoint, eval, graph, inference};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Record = (String, Vec<String>);

fn py_err(e: ewun::Error) -> PyErr {
    match e {
        ewun::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        ewun::Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        #[cfg(feature = "contextual")]
        ewun::Error::Backend(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_normalization(name: &str) -> PyResult<SurfaceNormalization> {
    name.parse().map_err(py_err)
}

fn records(items: Vec<Record>, split: Split) -> PyResult<Vec<EntityRecord>> {
    items
        .into_iter()
        .map(|(surface, ids)| EntityRecord::new(surface, ids, split).map_err(py_err))
        .collect()
}

fn tuples(records: &[EntityRecord]) -> Vec<Record> {
    records
        .iter()
        .map(|r| (r.surface.clone(), r.concept_ids.iter().cloned().collect()))
        .collect()
}

#[pyclass(name = "Dictionary", frozen)]
struct Dictionary(ConceptDictionary);

#[pymethods]
impl Dictionary {
    #[new]
    fn new(entries: Vec<Record>) -> PyResult<Self> {
        let pairs = entries
            .into_iter()
            .map(|(surface, ids)| (surface, ids.into_iter().collect()));
        ConceptDictionary::from_pairs(pairs)
            .map(Self)
            .map_err(py_err)
    }

    /// Reads a `surface<TAB>concept_ids` dictionary file.
    #[staticmethod]
    #[pyo3(signature = (path, normalization = "minimal"))]
    fn load(path: PathBuf, normalization: &str) -> PyResult<Self> {
        corpus::load_dictionary(&path, parse_normalization(normalization)?)
            .map(Self)
            .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn entries(&self) -> Vec<Record> {
        self.0
            .entries()
            .iter()
            .map(|e| (e.surface.clone(), e.concept_ids.iter().cloned().collect()))
            .collect()
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

#[pyclass(name = "Encoder")]
struct Encoder(EncoderHandle);

#[pymethods]
impl Encoder {
    #[staticmethod]
    #[pyo3(signature = (dim = 64, seed = 0))]
    fn toy(dim: usize, seed: u64) -> PyResult<Self> {
        enc::make_toy_encoder(dim, seed).map(Self).map_err(py_err)
    }

    /// Restores the encoder saved in a training checkpoint directory.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        checkpoint::restore(&path)
            .map(|restored| Self(restored.encoder))
            .map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().as_str()
    }

    fn encode(&self, surfaces: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let matrix = self.0.encode(&surfaces).map_err(py_err)?;
        Ok(matrix
            .vectors()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect())
    }

    fn parameter_checksum(&self) -> PyResult<String> {
        checkpoint::parameter_checksum(&self.0).map_err(py_err)
    }
}

/// Fine-tunes `encoder` in place and returns the run history.
///
/// When `out_dir` is given, checkpoints and the metric log are written there.
#[pyfunction]
#[pyo3(signature = (
    encoder, dictionary, train, test, dev = None, k = 30, batch_size = 16, epochs = 50,
    learning_rate = 1e-5, weight_decay = 0.01, seed = 0, out_dir = None, normalization = "minimal"
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    mut encoder: PyRefMut<'py, Encoder>,
    dictionary: &Dictionary,
    train: Vec<Record>,
    test: Vec<Record>,
    dev: Option<Vec<Record>>,
    k: usize,
    batch_size: usize,
    epochs: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
    out_dir: Option<PathBuf>,
    normalization: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let config = TrainConfig {
        k,
        batch_size,
        epochs,
        learning_rate,
        weight_decay,
        seed,
        ..TrainConfig::default()
    };
    let train = records(train, Split::Train)?;
    let dev = records(dev.unwrap_or_default(), Split::Dev)?;
    let test = records(test, Split::Test)?;
    let policy = out_dir.map(|dir| {
        Ok::<_, PyErr>(CheckpointPolicy {
            dir,
            normalization: parse_normalization(normalization)?,
            corpus_fingerprint: dictionary.0.fingerprint(),
        })
    });
    let policy = policy.transpose()?;
    let data = TrainData {
        train: &train,
        dev: &dev,
        test: &test,
        dictionary: &dictionary.0,
    };
    let state = trainer::train(data, &mut encoder.0, &config, policy.as_ref()).map_err(py_err)?;

    let out = PyDict::new(py);
    out.set_item("initial_top1_accuracy", state.initial_top1_accuracy)?;
    let history: Vec<Bound<'py, PyDict>> = state
        .history
        .iter()
        .map(|m| {
            let row = PyDict::new(py);
            row.set_item("epoch", m.epoch)?;
            row.set_item("mean_loss", m.mean_loss)?;
            row.set_item("top1_accuracy", m.top1_accuracy)?;
            row.set_item("wall_time", m.wall_time)?;
            Ok(row)
        })
        .collect::<PyResult<_>>()?;
    out.set_item("history", history)?;
    if let Some(best) = &state.best {
        out.set_item("best_epoch", best.epoch)?;
        out.set_item("best_top1_accuracy", best.top1_accuracy)?;
    }
    Ok(out)
}

/// Ranked `(surface, concept_ids, weight)` dictionary entries for a query.
#[pyfunction]
#[pyo3(signature = (query, dictionary, encoder, k = 5))]
fn normalize(
    query: &str,
    dictionary: &Dictionary,
    encoder: &Encoder,
    k: usize,
) -> PyResult<Vec<(String, Vec<String>, f64)>> {
    let result = inference::normalize(query, &dictionary.0, &encoder.0, k).map_err(py_err)?;
    Ok(result
        .ranked
        .into_iter()
        .map(|r| (r.surface, r.concept_ids.into_iter().collect(), r.weight))
        .collect())
}

/// `(score, matched)` for one pair under a cosine threshold.
#[pyfunction]
fn classify_pair(a: &str, b: &str, encoder: &Encoder, threshold: f64) -> PyResult<(f64, bool)> {
    let decision = inference::classify_pair(a, b, &encoder.0, threshold).map_err(py_err)?;
    Ok((decision.score, decision.matched))
}

/// `(threshold, f1, degenerate)` maximizing F1 over labelled pairs.
#[pyfunction]
fn calibrate_threshold(
    pairs: Vec<(String, String, bool)>,
    encoder: &Encoder,
) -> PyResult<(f64, f64, bool)> {
    let pairs: Vec<PairRecord> = pairs
        .into_iter()
        .map(|(a, b, label)| PairRecord::new(a, b, label, None).map_err(py_err))
        .collect::<PyResult<_>>()?;
    let c = inference::calibrate_threshold(&pairs, &encoder.0).map_err(py_err)?;
    Ok((c.threshold, c.f1, c.degenerate))
}

/// `(dictionary, train, test)` of generated organization names.
#[pyfunction]
#[pyo3(signature = (n_concepts = 50, variants_per_concept = 4, seed = 0))]
fn synthetic_corpus(
    n_concepts: usize,
    variants_per_concept: usize,
    seed: u64,
) -> PyResult<(Dictionary, Vec<Record>, Vec<Record>)> {
    let corpus = corpus::generate_synthetic_corpus(n_concepts, variants_per_concept, seed)
        .map_err(py_err)?;
    Ok((
        Dictionary(corpus.dictionary.clone()),
        tuples(&corpus.train),
        tuples(&corpus.test),
    ))
}

#[pyfunction]
fn normalize_surface(raw: &str) -> String {
    corpus::normalize_surface(raw)
}

#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    eval::edit_distance(a, b)
}

#[pyfunction]
fn softmax(values: Vec<f64>) -> Vec<f64> {
    trainer::softmax(&values)
}

/// KL divergence in nats from the softmaxed similarity edges to the softmaxed ground-truth edges.
#[pyfunction]
fn kl_edge_loss(gt_edges: Vec<f64>, sim_edges: Vec<f64>) -> PyResult<f64> {
    trainer::kl_edge_loss(&gt_edges, &sim_edges).map_err(py_err)
}

/// Similarities divided by their maximum when that maximum is positive.
#[pyfunction]
fn similarity_weights(sims: Vec<f64>) -> Vec<f64> {
    graph::SimilarityRow::from_sims(sims).weights
}

#[pyfunction]
fn top_k_indices(weights: Vec<f64>, k: usize) -> Vec<usize> {
    graph::top_k_indices(&weights, k)
}

#[pymodule]
fn ewun_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dictionary>()?;
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(classify_pair, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_surface, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_edge_loss, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_weights, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    Ok(())
}

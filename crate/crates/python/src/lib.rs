//! Python bindings over the core crate.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lum_core::datagen::{self, SyntheticWorldConfig};
use lum_core::eval::{self, ScalingPoint};
use lum_core::lum::{self, LumConfig};
use lum_core::query::{KnowledgeQuery, QueryEngine};
use lum_core::tokenize::ConditionFields;
use lum_core::LumError;

fn py_err(e: LumError) -> PyErr {
    match e {
        LumError::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        LumError::Io(_) | LumError::NonFiniteGradient(_) | LumError::NonFiniteLoss { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Users' chronological behavior sequences plus the item catalog.
#[pyclass(name = "Corpus", module = "lum_py")]
struct PyCorpus {
    inner: datagen::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Samples a synthetic world whose scenarios rotate user preferences by
    /// `strength`.
    #[staticmethod]
    #[pyo3(signature = (num_users=400, num_items=300, strength=2.0, seed=7))]
    fn synthetic(num_users: usize, num_items: usize, strength: f64, seed: u64) -> PyResult<Self> {
        let config = SyntheticWorldConfig {
            num_users,
            num_items,
            condition_effect_strength: strength,
            rng_seed: seed,
            ..Default::default()
        };
        let inner = datagen::generate_synthetic_corpus(&config).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = datagen::Corpus::load_dir(&dir).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(py_err)
    }

    /// Splits off the last `n` events of every user: `(history, held_out)`.
    fn split(&self, n: usize) -> PyResult<(Self, Self)> {
        let (a, b) = datagen::chronological_split(&self.inner, n).map_err(py_err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.vocab.num_items
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.inner.num_events()
    }

    fn users(&self) -> Vec<u32> {
        self.inner.users.keys().copied().collect()
    }

    /// `(item_id, scenario_id, timestamp)` for each event of `user_id`.
    fn history(&self, user_id: u32) -> Vec<(u32, u32, u64)> {
        self.inner
            .history(user_id)
            .iter()
            .map(|e| (e.item_id, e.scenario_id, e.timestamp))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(users={}, items={}, events={})",
            self.inner.num_users(),
            self.inner.vocab.num_items,
            self.inner.num_events()
        )
    }
}

/// A trained large user model.
#[pyclass(name = "LumModel", module = "lum_py")]
struct PyLumModel {
    inner: lum::LumModel<f32>,
}

#[pymethods]
impl PyLumModel {
    /// Trains the small test-scale configuration; returns the model and the
    /// mean loss of every epoch.
    #[staticmethod]
    #[pyo3(signature = (corpus, epochs=5, seed=0, use_conditions=true))]
    fn train(corpus: &PyCorpus, epochs: usize, seed: u64, use_conditions: bool) -> PyResult<(Self, Vec<f64>)> {
        let config = LumConfig {
            epochs,
            seed,
            use_conditions,
            ..LumConfig::tiny()
        };
        let (inner, report) = lum::train(&corpus.inner, &config).map_err(py_err)?;
        Ok((Self { inner }, report.epoch_mean_loss))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = lum::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Writes a checkpoint and returns its model version.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        lum::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.inner.model_dim()
    }

    /// Group-queries `user_id` after their history in `corpus`, one query per
    /// scenario. Each result is `(o, [(item_id, score), ...])`.
    #[pyo3(signature = (corpus, user_id, scenarios, k=10))]
    fn query(
        &self,
        corpus: &PyCorpus,
        user_id: u32,
        scenarios: Vec<u32>,
        k: usize,
    ) -> PyResult<Vec<(Vec<f32>, Vec<(u32, f32)>)>> {
        let engine = QueryEngine::new(&self.inner, &corpus.inner.items).map_err(py_err)?;
        let queries = scenarios
            .into_iter()
            .map(|s| KnowledgeQuery::new(user_id, ConditionFields::scenario(s)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        let results = engine
            .query_group(corpus.inner.history(user_id), &queries, k)
            .map_err(py_err)?;
        Ok(results.into_iter().map(|r| (r.o, r.top_k)).collect())
    }

    /// Fraction of held-out events whose item the LUM ranks in its top `k`.
    #[pyo3(signature = (history, held_out, k=10))]
    fn recall(&self, history: &PyCorpus, held_out: &PyCorpus, k: usize) -> PyResult<f64> {
        let r = lum_core::pipeline::lum_recall(&self.inner, &history.inner, &held_out.inner, k).map_err(py_err)?;
        Ok(r.recall_at_k)
    }
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn recall_at_k(ranked: Vec<u32>, relevant: BTreeSet<u32>, k: usize) -> PyResult<f64> {
    eval::recall_at_k(&ranked, &relevant, k).map_err(py_err)
}

/// Least squares of `y` on `ln(x)`; returns `(a, b, r_squared)`.
#[pyfunction]
fn fit_scaling_law(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err("xs and ys differ in length"));
    }
    let points: Vec<ScalingPoint> = xs.into_iter().zip(ys).map(|(x, y)| ScalingPoint { x, y }).collect();
    let f = eval::fit_scaling_law(&points).map_err(py_err)?;
    Ok((f.a, f.b, f.r_squared))
}

/// Summed InfoNCE; row `r` of every argument belongs to position `r`.
#[pyfunction]
fn nce_loss(
    outputs: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<Vec<f64>>>,
    temperature: f64,
) -> PyResult<f64> {
    lum::nce_loss(&outputs, &positives, &negatives, temperature).map_err(py_err)
}

#[pyfunction]
fn interest_matching(o: Vec<f32>, e: Vec<f32>) -> PyResult<f32> {
    lum_core::dlrm::interest_matching(&o, &e).map_err(py_err)
}

#[pymodule]
fn lum_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyLumModel>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(fit_scaling_law, m)?)?;
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(interest_matching, m)?)?;
    Ok(())
}

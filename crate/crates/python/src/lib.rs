//! Python bindings: `import pyctxrank`.
//!
//! Wraps the core types (items, users, scorer models, re-ranking sessions,
//! simulated worlds) and the feature, re-ranking and metric functions.
//! Errors surface as `ValueError`, or `OSError` for file problems.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctxrank::config::AppConfig;
use ctxrank::domain::{self, FeedContext};
use ctxrank::features::{self, FeatureConfig};
use ctxrank::model::{FeatureMode, ModelError};
use ctxrank::pipeline;
use ctxrank::reranker::{self, RerankParams};
use ctxrank::{eval, simgen};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => value_err(other),
    }
}

/// Parses JSON text into Python objects with the standard `json` module.
fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Item", from_py_object)]
#[derive(Clone)]
struct PyItem(domain::Item);

#[pymethods]
impl PyItem {
    #[new]
    #[pyo3(signature = (id, embedding, topic, main_score=0.0))]
    fn new(id: String, embedding: Vec<f64>, topic: u32, main_score: f64) -> Self {
        Self(domain::Item::new(id, embedding, topic, main_score))
    }
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }
    #[getter]
    fn embedding(&self) -> Vec<f64> {
        self.0.embedding.clone()
    }
    #[getter]
    fn topic(&self) -> u32 {
        self.0.topic
    }
    #[getter]
    fn main_score(&self) -> f64 {
        self.0.main_score
    }
    fn __repr__(&self) -> String {
        format!("Item(id={:?}, topic={}, main_score={})", self.0.id, self.0.topic, self.0.main_score)
    }
}

#[pyclass(name = "UserProfile", from_py_object)]
#[derive(Clone)]
struct PyUser(domain::UserProfile);

#[pymethods]
impl PyUser {
    #[new]
    fn new(id: String, interest_embedding: Vec<f64>) -> Self {
        Self(domain::UserProfile::new(id, interest_embedding))
    }
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }
    #[getter]
    fn interest_embedding(&self) -> Vec<f64> {
        self.0.interest_embedding.clone()
    }
    fn __repr__(&self) -> String {
        format!("UserProfile(id={:?})", self.0.id)
    }
}

fn unwrap_items(items: Vec<PyItem>) -> Vec<domain::Item> {
    items.into_iter().map(|i| i.0).collect()
}

fn feed(user: &PyUser, items: Vec<PyItem>) -> PyResult<domain::Feed> {
    domain::Feed::new(user.0.clone(), unwrap_items(items)).map_err(value_err)
}

/// A trained multi-task scorer.
#[pyclass(name = "Model", frozen)]
struct PyModel(ctxrank::ScorerModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ctxrank::ScorerModel::load(&path).map(Self).map_err(model_err)
    }
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ctxrank::ScorerModel::from_json(text).map(Self).map_err(model_err)
    }
    fn to_json(&self) -> String {
        self.0.to_json()
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(model_err)
    }
    /// Per-task engagement probabilities for one feature vector.
    fn forward(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward(&features).map(|p| p.0).map_err(model_err)
    }
    #[getter]
    fn feature_mode(&self) -> String {
        self.0.feature_mode.to_string()
    }
    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim
    }
    #[getter]
    fn task_count(&self) -> usize {
        self.0.task_count
    }
    #[getter]
    fn num_topics(&self) -> usize {
        self.0.meta.num_topics
    }
}

fn params(window: usize, context_depth: usize, page_size: usize, objective_task: usize) -> RerankParams {
    RerankParams {
        window,
        context_depth,
        page_size,
        objective_task,
    }
}

fn model_features(model: &PyModel, context_depth: usize) -> FeatureConfig {
    FeatureConfig {
        context_depth,
        num_topics: model.0.meta.num_topics,
        ..FeatureConfig::default()
    }
}

/// Greedy contextual re-ranking of a whole feed. Returns `(ids, scores)`.
#[pyfunction]
#[pyo3(signature = (model, user, items, window=10, context_depth=5, objective_task=0))]
fn rerank_feed(
    model: &PyModel,
    user: &PyUser,
    items: Vec<PyItem>,
    window: usize,
    context_depth: usize,
    objective_task: usize,
) -> PyResult<(Vec<String>, Vec<f64>)> {
    let feed = feed(user, items)?;
    let p = params(window, context_depth, feed.len().max(1), objective_task);
    let out = reranker::rerank_feed(&feed, &model.0, &p, &model_features(model, context_depth)).map_err(value_err)?;
    Ok((out.items.into_iter().map(|i| i.id).collect(), out.scores))
}

/// Maximal marginal relevance over main-pass scores. Returns item ids.
#[pyfunction]
#[pyo3(signature = (user, items, lam, depth=5))]
fn mmr_rerank(user: &PyUser, items: Vec<PyItem>, lam: f64, depth: usize) -> PyResult<Vec<String>> {
    let feed = feed(user, items)?;
    let out = reranker::mmr_rerank(&feed, lam, depth).map_err(value_err)?;
    Ok(out.into_iter().map(|i| i.id).collect())
}

/// Demand-based re-ranking: one page at a time with carried-over context.
#[pyclass(name = "Session")]
struct PySession(reranker::SessionState);

#[pymethods]
impl PySession {
    #[new]
    fn new(user: &PyUser, items: Vec<PyItem>) -> PyResult<Self> {
        Ok(Self(reranker::SessionState::new(feed(user, items)?)))
    }
    #[pyo3(signature = (model, page_size, window=10, context_depth=5, objective_task=0))]
    fn next_page(
        &mut self,
        model: &PyModel,
        page_size: usize,
        window: usize,
        context_depth: usize,
        objective_task: usize,
    ) -> PyResult<(Vec<String>, Vec<f64>)> {
        let p = params(window, context_depth, page_size, objective_task);
        let out =
            reranker::rerank_page(&mut self.0, &model.0, &p, &model_features(model, context_depth)).map_err(value_err)?;
        Ok((out.items.into_iter().map(|i| i.id).collect(), out.scores))
    }
    #[getter]
    fn done(&self) -> bool {
        self.0.is_done()
    }
    #[getter]
    fn served(&self) -> Vec<String> {
        self.0.served().iter().map(|i| i.id.clone()).collect()
    }
}

/// The ten contextual features of `candidate` placed below `prefix`.
#[pyfunction]
#[pyo3(signature = (candidate, prefix, slot=None, context_depth=5, feed_length=20, num_topics=8))]
fn extract_contextual(
    candidate: &PyItem,
    prefix: Vec<PyItem>,
    slot: Option<usize>,
    context_depth: usize,
    feed_length: usize,
    num_topics: usize,
) -> PyResult<Vec<f64>> {
    let prefix = unwrap_items(prefix);
    let cfg = FeatureConfig {
        context_depth,
        missing_context_fill: 0.0,
        feed_length,
        num_topics,
    };
    let ctx = FeedContext::new(&prefix, context_depth);
    let f = features::extract_contextual(&candidate.0, &ctx, slot.unwrap_or(prefix.len()), &cfg).map_err(value_err)?;
    Ok(f.0.to_vec())
}

/// The point-wise block: affinity, main score, topic one-hot.
#[pyfunction]
#[pyo3(signature = (user, item, num_topics=8))]
fn pointwise_features(user: &PyUser, item: &PyItem, num_topics: usize) -> PyResult<Vec<f64>> {
    features::pointwise_features(&user.0, &item.0, num_topics).map_err(value_err)
}

/// Sum of predictions over sum of labels.
#[pyfunction]
fn calibration(predictions: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::calibration(&predictions, &labels).map_err(value_err)
}

/// `(low, high, count, calibration)` of one similarity bucket.
type BucketRow = (f64, f64, usize, Option<f64>);

/// Per-bucket calibration as a list of `(low, high, count, calibration)`.
#[pyfunction]
#[pyo3(signature = (similarity, predictions, labels, buckets=40))]
fn calibration_by_bucket(
    similarity: Vec<f64>,
    predictions: Vec<f64>,
    labels: Vec<u8>,
    buckets: usize,
) -> PyResult<Vec<BucketRow>> {
    if similarity.len() != predictions.len() || predictions.len() != labels.len() {
        return Err(PyValueError::new_err("similarity, predictions and labels differ in length"));
    }
    let rows: Vec<eval::ScoredImpression> = similarity
        .iter()
        .zip(&predictions)
        .zip(&labels)
        .map(|((&s, &p), &y)| eval::ScoredImpression {
            similarity_score: s,
            prediction: p,
            label: y,
        })
        .collect();
    let report = eval::calibration_by_bucket(&rows, &eval::uniform_edges(buckets)).map_err(value_err)?;
    Ok(report
        .buckets
        .iter()
        .map(|b| (b.low, b.high, b.count, b.calibration))
        .collect())
}

/// Mean log-loss over the entropy of the label mean.
#[pyfunction]
fn normalized_entropy(predictions: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::normalized_entropy(&predictions, &labels)
        .map(|r| r.ne)
        .map_err(value_err)
}

/// A generated synthetic world.
#[pyclass(name = "World", frozen)]
struct PyWorld(simgen::World);

#[pymethods]
impl PyWorld {
    /// `config` is a JSON object of world settings; omitted keys take defaults.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: simgen::WorldConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(value_err)?,
            None => simgen::WorldConfig::default(),
        };
        simgen::generate_world(&cfg).map(Self).map_err(value_err)
    }
    #[getter]
    fn items(&self) -> Vec<PyItem> {
        self.0.items.iter().cloned().map(PyItem).collect()
    }
    /// Users as seen by serving code, without ground-truth fatigue.
    #[getter]
    fn users(&self) -> Vec<PyUser> {
        self.0.users.iter().map(|u| PyUser(u.serving_view())).collect()
    }
    /// Impressions of days `start..end` as a list of dicts.
    fn simulate_days<'py>(&self, py: Python<'py>, start: u32, end: u32) -> PyResult<Bound<'py, PyAny>> {
        let log = simgen::simulate_days(&self.0, start..end).map_err(value_err)?;
        let text = serde_json::to_string(&log.impressions).map_err(value_err)?;
        json_to_py(py, &text)
    }
}

/// Runs one pipeline stage (`simulate`, `train-baseline`, `train-contextual`,
/// `eval`) with an optional config file and `key.path=value` overrides.
/// Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (stage, config=None, overrides=Vec::new()))]
fn run_stage<'py>(
    py: Python<'py>,
    stage: &str,
    config: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = AppConfig::load(config.as_deref(), &overrides).map_err(value_err)?;
    let stage_err = |e: pipeline::PipelineError| match e.exit_code() {
        2 => value_err(e),
        _ => PyOSError::new_err(e.to_string()),
    };
    let text = match stage {
        "simulate" => serde_json::to_string(&pipeline::cmd_simulate(&cfg).map_err(stage_err)?),
        "train-baseline" => serde_json::to_string(&pipeline::cmd_train(&cfg, FeatureMode::Baseline).map_err(stage_err)?),
        "train-contextual" => {
            serde_json::to_string(&pipeline::cmd_train(&cfg, FeatureMode::Contextual).map_err(stage_err)?)
        }
        "eval" => {
            let s = pipeline::cmd_eval(&cfg).map_err(stage_err)?;
            serde_json::to_string(&serde_json::json!({
                "ne": s.ne,
                "comparison": s.comparison,
                "report_dir": s.report_dir,
            }))
        }
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    }
    .map_err(value_err)?;
    let out = json_to_py(py, &text)?;
    if let Ok(d) = out.cast::<PyDict>() {
        d.set_item("stage", stage)?;
    }
    Ok(out)
}

#[pymodule]
fn pyctxrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyItem>()?;
    m.add_class::<PyUser>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(rerank_feed, m)?)?;
    m.add_function(wrap_pyfunction!(mmr_rerank, m)?)?;
    m.add_function(wrap_pyfunction!(extract_contextual, m)?)?;
    m.add_function(wrap_pyfunction!(pointwise_features, m)?)?;
    m.add_function(wrap_pyfunction!(calibration, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_by_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}

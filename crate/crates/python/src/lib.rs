//! Python bindings over the run pipeline.
//!
//! Structured results cross the boundary as plain `dict`/`list` values built
//! from their JSON form, so the Python side sees the same field names as the
//! artifacts on disk.

use std::path::PathBuf;

use clt_tracer::analysis::Variant;
use clt_tracer::attribution::AttributionGraph;
use clt_tracer::pipeline::{AttributionConfig, Pipeline, RunConfig};
use clt_tracer::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Serialize through JSON and hand the text to Python's `json.loads`.
fn to_object<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    match name {
        "general" => Ok(Variant::General),
        "top100" => Ok(Variant::Top100),
        other => Err(PyValueError::new_err(format!("variant must be `general` or `top100`, got `{other}`"))),
    }
}

#[pyclass(name = "RunConfig", module = "clt_tracer_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn demo() -> Self {
        Self { inner: RunConfig::demo() }
    }

    #[staticmethod]
    fn smoke() -> Self {
        Self { inner: RunConfig::smoke() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    /// Digest of the resolved configuration.
    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn artifact_dir(&self) -> PathBuf {
        self.inner.artifact_dir.clone()
    }

    #[setter]
    fn set_artifact_dir(&mut self, dir: PathBuf) {
        self.inner.artifact_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, artifact_dir={:?})", self.inner.seed, self.inner.artifact_dir)
    }
}

#[pyclass(name = "Graph", module = "clt_tracer_py", frozen)]
pub struct PyGraph {
    inner: AttributionGraph,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: AttributionGraph::from_json(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: AttributionGraph::load(&path).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn version(&self) -> u32 {
        self.inner.version
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn target_position(&self) -> usize {
        self.inner.target_position
    }

    #[getter]
    fn nodes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.nodes)
    }

    #[getter]
    fn edges<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.edges)
    }

    fn __repr__(&self) -> String {
        format!("Graph(prompt={:?}, nodes={}, edges={})", self.inner.prompt, self.inner.nodes.len(), self.inner.edges.len())
    }
}

/// A run rooted at the configuration's artifact directory. Every method
/// brings the stages it needs up to date first.
#[pyclass(name = "Pipeline", module = "clt_tracer_py", unsendable)]
pub struct PyPipeline {
    inner: Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        Ok(Self { inner: Pipeline::open(&config.inner).map_err(to_py)? })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.inner.config().clone() }
    }

    /// Stages executed (rather than reused) since this pipeline was opened.
    fn executed(&self) -> Vec<String> {
        self.inner.executed().to_vec()
    }

    fn languages(&self) -> Vec<String> {
        self.inner.config().corpus.languages.iter().map(|l| l.name.clone()).collect()
    }

    fn tokenizer_summary<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.tokenizer_summary().map_err(to_py)?;
        to_object(py, &s)
    }

    /// Final per-layer transcoder metrics.
    fn clt_metrics<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.clt_report().map_err(to_py)?;
        to_object(py, &r.final_metrics())
    }

    fn metrics(&mut self) -> PyResult<Vec<PathBuf>> {
        self.inner.metrics().map_err(to_py)
    }

    /// Layer profile for `general` or `top100`: `(csv path, rows)`.
    #[pyo3(signature = (variant = "general"))]
    fn score<'py>(&mut self, py: Python<'py>, variant: &str) -> PyResult<(PathBuf, Bound<'py, PyAny>)> {
        let (path, rows) = self.inner.score(parse_variant(variant)?).map_err(to_py)?;
        Ok((path, to_object(py, &rows)?))
    }

    fn language_features<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let f = self.inner.language_features().map_err(to_py)?;
        to_object(py, &f)
    }

    /// The configured demo prompts as `(language index, text)`.
    fn demo_prompts(&self) -> Vec<(usize, String)> {
        self.inner.demo_prompts().into_iter().map(|(l, s)| (l.0, s)).collect()
    }

    #[pyo3(signature = (prompt, top_logits = None, node_keep = None, edge_keep = None))]
    fn attribute(
        &mut self,
        prompt: &str,
        top_logits: Option<usize>,
        node_keep: Option<f64>,
        edge_keep: Option<f64>,
    ) -> PyResult<PyGraph> {
        let base = self.inner.config().attribution.clone();
        let cfg = AttributionConfig {
            top_logits: top_logits.unwrap_or(base.top_logits),
            node_keep: node_keep.unwrap_or(base.node_keep),
            edge_keep: edge_keep.unwrap_or(base.edge_keep),
            ..base
        };
        let mut check = self.inner.config().clone();
        check.attribution = cfg.clone();
        check.validate().map_err(to_py)?;
        Ok(PyGraph { inner: self.inner.attribute_with(prompt, &cfg).map_err(to_py)? })
    }

    /// Paths of the demo graphs, building them if needed.
    fn graphs(&mut self) -> PyResult<Vec<PathBuf>> {
        self.inner.graphs().map_err(to_py)
    }
}

/// Shannon entropy (nats) of a per-language distribution.
#[pyfunction]
fn multilingual_score(distribution: Vec<f64>) -> PyResult<f64> {
    clt_tracer::analysis::multilingual_score(&distribution).map_err(to_py)
}

#[pymodule]
fn clt_tracer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(multilingual_score, m)?)?;
    m.add("GRAPH_VERSION", clt_tracer::attribution::GRAPH_VERSION)?;
    Ok(())
}

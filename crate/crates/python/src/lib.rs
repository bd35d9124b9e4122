//! Python bindings: embedding, deduplication, rule-based reporting, metrics and losses.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use e2t_core::cot::{parse_llm_response as core_parse, Reasoner, ThreatLexicon};
use e2t_core::dedup::{KnowledgeBase as CoreKb, TimelineEntry};
use e2t_core::embedder::{self, EmbeddingVector, HashingEncoder};
use e2t_core::event_model::{validate_record, HoipTuple, PipelineConfig, RawRecord};
use e2t_core::loss_math::{self, ActionProjection, EntityBank};
use e2t_core::persistence;
use e2t_core::stream::{run_pipeline, Pipeline};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Hashed bag-of-ngrams embedding of `text`, unit length.
#[pyfunction]
#[pyo3(signature = (text, dim = 384))]
fn embed(text: &str, dim: usize) -> PyResult<Vec<f32>> {
    if dim < 8 {
        return Err(value_err("dim must be at least 8"));
    }
    Ok(embedder::embed(text, dim).into_values())
}

#[pyfunction]
fn cosine_sim(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    embedder::cosine_sim_slices(&u, &v).map_err(value_err)
}

type TupleArg = (String, Option<String>, String, String, f64);

fn to_tuples(tuples: Vec<TupleArg>) -> Vec<HoipTuple> {
    tuples
        .into_iter()
        .map(|(h, o, a, p, c)| HoipTuple::new(h, o.as_deref(), a, p, c))
        .collect()
}

/// Sentence for a list of `(human, object or None, interaction, place, confidence)` tuples.
#[pyfunction]
fn render_description(tuples: Vec<TupleArg>) -> String {
    e2t_core::render_description(&to_tuples(tuples))
}

fn pairs(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(value_err("scores and labels differ in length"));
    }
    Ok(scores.into_iter().zip(labels).collect())
}

#[pyfunction]
fn compute_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    e2t_core::compute_auc(&pairs(scores, labels)?).map_err(value_err)
}

#[pyfunction]
fn compute_ap(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    e2t_core::compute_ap(&pairs(scores, labels)?).map_err(value_err)
}

/// Splits a three-tier answer; returns a dict with `tier1`, `tier2`, `tier3`, `score`.
#[pyfunction]
fn parse_llm_response<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let p = core_parse(text).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("tier1", p.tier1)?;
    d.set_item("tier2", p.tier2)?;
    d.set_item("tier3", p.tier3)?;
    d.set_item("score", p.score)?;
    Ok(d)
}

#[pyfunction]
fn pointer_select(v: Vec<f64>, entities: Vec<Vec<f64>>) -> PyResult<usize> {
    let bank = EntityBank::new(entities).map_err(value_err)?;
    loss_math::pointer_select(&v, &bank).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (ffn_h_out, ffn_o_out, entities, c_h, c_o, temperature = loss_math::DEFAULT_TEMPERATURE))]
fn loc_loss(
    ffn_h_out: Vec<f64>,
    ffn_o_out: Vec<f64>,
    entities: Vec<Vec<f64>>,
    c_h: usize,
    c_o: usize,
    temperature: f64,
) -> PyResult<f64> {
    let bank = EntityBank::new(entities).map_err(value_err)?;
    let proj = ActionProjection {
        ffn_h_out,
        ffn_o_out,
        temperature,
    };
    loss_math::loc_loss(&proj, &bank, c_h, c_o).map_err(value_err)
}

#[pyfunction]
fn act_loss(a: Vec<f64>, a_hat: Vec<f64>) -> PyResult<f64> {
    loss_math::act_loss(&a, &a_hat).map_err(value_err)
}

#[pyfunction]
fn place_loss(p: Vec<f64>, p_hat: Vec<f64>) -> PyResult<f64> {
    loss_math::place_loss(&p, &p_hat).map_err(value_err)
}

#[pyfunction]
fn lm_loss(token_probs: Vec<f64>) -> PyResult<f64> {
    loss_math::lm_loss(&token_probs).map_err(value_err)
}

#[pyfunction]
fn total_loss(l_v: f64, l_lm: f64) -> PyResult<f64> {
    loss_math::total_loss(l_v, l_lm).map_err(value_err)
}

/// `(name, passed, detail)` for every built-in loss check.
#[pyfunction]
#[pyo3(signature = (seed = 11))]
fn losses_check(seed: u64) -> Vec<(String, bool, String)> {
    loss_math::verification_suite(seed)
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

fn config(dim: usize, tau: f64, fps: f64, reasoning_interval: f64, dedup: bool) -> PyResult<PipelineConfig> {
    let c = PipelineConfig {
        dim,
        tau_sim: tau,
        target_fps: fps,
        reasoning_interval,
        dedup_enabled: dedup,
        ..PipelineConfig::default()
    };
    c.validate().map_err(value_err)?;
    Ok(c)
}

/// Runs newline-delimited frame messages through the rule-based pipeline and
/// returns the reports as dicts.
#[pyfunction]
#[pyo3(signature = (lines, tau = 0.9, fps = 1.25, dim = 384, reasoning_interval = 5.0, dedup = true))]
fn replay<'py>(
    py: Python<'py>,
    lines: Vec<String>,
    tau: f64,
    fps: f64,
    dim: usize,
    reasoning_interval: f64,
    dedup: bool,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let cfg = config(dim, tau, fps, reasoning_interval, dedup)?;
    let reasoner = Reasoner::rule_based(ThreatLexicon::default(), cfg.bands);
    let pipeline = Pipeline::new(cfg.clone(), Box::new(HashingEncoder::new(cfg.dim)), reasoner).map_err(value_err)?;
    let input = lines.join("\n").into_bytes();
    let mut reports = Vec::new();
    run_pipeline(std::io::Cursor::new(input), pipeline, |r| {
        reports.push(serde_json::to_string(&r.report).map_err(std::io::Error::from)?);
        Ok(())
    })
    .map_err(value_err)?;
    reports.iter().map(|s| json_to_py(py, s)).collect()
}

/// Runs the command-line tool in-process; returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("e2t".to_owned()).chain(args);
    let code = e2t_core::cli::run_cli(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn entry_dict<'py>(py: Python<'py>, e: &TimelineEntry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("timestamp", e.timestamp)?;
    d.set_item("last_updated", e.last_updated)?;
    d.set_item("description", &e.description)?;
    d.set_item("cluster_id", e.cluster_id)?;
    d.set_item("representative_event_id", e.representative_event_id)?;
    d.set_item("member_count", e.member_count)?;
    Ok(d)
}

/// Incremental semantic clustering of event descriptions.
#[pyclass(name = "KnowledgeBase")]
struct PyKnowledgeBase {
    inner: CoreKb,
    last_timestamp: Option<f64>,
}

#[pymethods]
impl PyKnowledgeBase {
    #[new]
    #[pyo3(signature = (dim = 384, tau = 0.9, dedup = true))]
    fn new(dim: usize, tau: f64, dedup: bool) -> PyResult<Self> {
        let cfg = config(dim, tau, PipelineConfig::default().target_fps, 5.0, dedup)?;
        Ok(Self {
            inner: CoreKb::new(cfg),
            last_timestamp: None,
        })
    }

    /// Adds one event; the description is embedded unless `embedding` is given.
    /// Returns `(cluster_id, is_novel)`.
    #[pyo3(signature = (event_id, timestamp, description, embedding = None))]
    fn ingest(
        &mut self,
        event_id: u64,
        timestamp: f64,
        description: String,
        embedding: Option<Vec<f32>>,
    ) -> PyResult<(u64, bool)> {
        let dim = self.inner.dim();
        let embedding = match embedding {
            Some(v) => v,
            None => embedder::embed(&description, dim).into_values(),
        };
        let raw = RawRecord {
            id: event_id,
            timestamp,
            frame_id: event_id as i64,
            description,
            embedding,
            tuples: Vec::new(),
        };
        let record = validate_record(raw, self.inner.config(), self.last_timestamp).map_err(value_err)?;
        let outcome = self.inner.ingest(record).map_err(value_err)?;
        self.last_timestamp = Some(timestamp);
        Ok((outcome.cluster_id(), outcome.is_novel()))
    }

    fn timeline<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.timeline().iter().map(|e| entry_dict(py, e)).collect()
    }

    /// Representative embedding and centroid of a cluster.
    fn cluster<'py>(&self, py: Python<'py>, cluster_id: u64) -> PyResult<Bound<'py, PyDict>> {
        let c = self
            .inner
            .cluster(cluster_id)
            .ok_or_else(|| value_err(format!("no cluster {cluster_id}")))?;
        let d = PyDict::new(py);
        d.set_item("members", c.members().iter().map(|m| m.event_id).collect::<Vec<_>>())?;
        d.set_item("representative", c.representative().event_id)?;
        d.set_item("centroid", c.centroid().to_vec())?;
        Ok(d)
    }

    #[getter]
    fn cluster_count(&self) -> usize {
        self.inner.cluster_count()
    }

    #[getter]
    fn event_count(&self) -> usize {
        self.inner.event_count()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        persistence::snapshot_save(&self.inner, path).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = persistence::snapshot_load(path).map_err(io_err)?;
        let last_timestamp = inner.latest_timestamp();
        Ok(Self { inner, last_timestamp })
    }
}

/// Unit vector check used by callers that bring their own embeddings.
#[pyfunction]
fn is_unit(v: Vec<f32>) -> bool {
    EmbeddingVector::from_unit(v).is_ok()
}

#[pymodule]
fn e2t(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(is_unit, m)?)?;
    m.add_function(wrap_pyfunction!(render_description, m)?)?;
    m.add_function(wrap_pyfunction!(compute_auc, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ap, m)?)?;
    m.add_function(wrap_pyfunction!(parse_llm_response, m)?)?;
    m.add_function(wrap_pyfunction!(pointer_select, m)?)?;
    m.add_function(wrap_pyfunction!(loc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(act_loss, m)?)?;
    m.add_function(wrap_pyfunction!(place_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(losses_check, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyKnowledgeBase>()?;
    Ok(())
}

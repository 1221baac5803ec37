//! Python bindings: documents, supervision, training, evaluation and checkpoints.
//!
//! Structured values (configs, records, reports) cross the boundary as JSON
//! and arrive in Python as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

use rpt_core::corpus::{self, ChunkPartition};
use rpt_core::eval::{self, EvalDoc, EvalNeighbors, DEFAULT_KS};
use rpt_core::lexical::{Bm25Params, QueryForm};
use rpt_core::model::{cached, Mode, ModelConfig, NeighborSource};
use rpt_core::supervision::{
    build_document_records, build_lexical_document_records, CacheLmScorer, ScoringProvider, SupervisionRecord,
    UniformScorer, N_CAND,
};
use rpt_core::synthetic::{generate_corpus, Layout};
use rpt_core::training::{checkpoint, AdaBelief, SamplingSchedule, Schedules, TrainConfig, TrainDoc, TrainState};
use rpt_core::RptError;

fn err(e: RptError) -> PyErr {
    match e {
        RptError::Config(_) | RptError::Precondition(_) | RptError::UnknownConfigKey(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

/// Recursively overwrites `base` with the keys of `patch`; unknown keys are errors.
fn merge(base: &mut Value, patch: Value, path: &str) -> PyResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| PyValueError::new_err(format!("unknown config key {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// A tokenized document.
#[pyclass(module = "rpt", frozen, from_py_object)]
#[derive(Clone)]
struct Document {
    inner: corpus::Document,
}

#[pymethods]
impl Document {
    #[new]
    #[pyo3(signature = (id, tokens, vocab_size = 256))]
    fn new(id: String, tokens: Vec<u32>, vocab_size: usize) -> PyResult<Self> {
        Ok(Self { inner: corpus::Document::new(id, tokens, vocab_size).map_err(err)? })
    }

    /// Byte-level tokenization of `text`.
    #[staticmethod]
    fn from_text(id: String, text: &str) -> PyResult<Self> {
        Self::new(id, text.bytes().map(u32::from).collect(), 256)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens.clone()
    }

    /// The document split into chunks of `chunk_len` tokens; a trailing
    /// partial chunk is dropped.
    fn chunks(&self, chunk_len: usize) -> PyResult<Vec<Vec<u32>>> {
        if chunk_len == 0 {
            return Err(PyValueError::new_err("chunk_len must be positive"));
        }
        let p = corpus::partition(&self.inner, chunk_len);
        Ok((0..p.num_chunks()).map(|i| p.chunk_tokens(i).to_vec()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Document(id={:?}, tokens={})", self.inner.id, self.inner.len())
    }
}

/// Synthetic documents whose early facts are queried many chunks later.
#[pyfunction]
#[pyo3(signature = (prefix, n, seed = 0))]
fn synthetic_corpus(prefix: &str, n: usize, seed: u64) -> Vec<Document> {
    generate_corpus(prefix, n, Layout::default(), seed).into_iter().map(|d| Document { inner: d.document }).collect()
}

/// Partitioned documents with supervision records.
#[pyclass(module = "rpt", frozen)]
struct Dataset {
    docs: Vec<TrainDoc>,
}

#[pymethods]
impl Dataset {
    /// Builds records for `docs` with the given scoring provider
    /// (`cache-lm`, `uniform`, or `lexical` for BM25-labelled records).
    /// The cache LM is fit on `docs` themselves unless `reference` is given.
    #[new]
    #[pyo3(signature = (docs, chunk_len = 8, exclusion = 2, scorer = "cache-lm", reference = None, n_cand = N_CAND, cache_weight = 0.3))]
    fn new(
        docs: Vec<Document>,
        chunk_len: usize,
        exclusion: usize,
        scorer: &str,
        reference: Option<Vec<Document>>,
        n_cand: usize,
        cache_weight: f64,
    ) -> PyResult<Self> {
        if chunk_len == 0 {
            return Err(PyValueError::new_err("chunk_len must be positive"));
        }
        let raw: Vec<corpus::Document> = docs.iter().map(|d| d.inner.clone()).collect();
        let vocab = raw.iter().flat_map(|d| d.tokens.iter()).max().map_or(256, |&t| (t as usize + 1).max(256));
        let reference: Vec<corpus::Document> =
            reference.map_or_else(|| raw.clone(), |r| r.into_iter().map(|d| d.inner).collect());
        let provider: Option<Box<dyn ScoringProvider>> = match scorer {
            "cache-lm" => Some(Box::new(CacheLmScorer::train(&reference, vocab, cache_weight))),
            "uniform" => Some(Box::new(UniformScorer { vocab_size: vocab })),
            "lexical" => None,
            other => return Err(PyValueError::new_err(format!("unknown scorer {other}"))),
        };
        let params = Bm25Params::default();
        let mut out = Vec::with_capacity(raw.len());
        for d in &raw {
            let p = corpus::partition(d, chunk_len);
            let records = match &provider {
                Some(s) => build_document_records(s.as_ref(), &p, exclusion, params, n_cand).map_err(err)?,
                None => build_lexical_document_records(&p, exclusion, params, n_cand),
            };
            out.push(TrainDoc::new(p, records).map_err(err)?);
        }
        Ok(Self { docs: out })
    }

    /// All supervision records as dicts.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let all: Vec<&SupervisionRecord> = self.docs.iter().flat_map(|d| &d.records).collect();
        to_py(py, &all)
    }

    /// Mean over records of the best target score among the top-`k` candidates.
    fn max_target_at_k(&self, k: usize) -> f64 {
        let all: Vec<SupervisionRecord> = self.docs.iter().flat_map(|d| d.records.clone()).collect();
        rpt_core::supervision::max_target_at_k(&all, k)
    }

    fn __len__(&self) -> usize {
        self.docs.len()
    }
}

impl Dataset {
    fn eval_docs(&self) -> Vec<EvalDoc> {
        self.docs.iter().map(|d| EvalDoc { partition: d.partition.clone(), records: d.records.clone() }).collect()
    }
}

fn train_config(
    mode: &str,
    steps: u64,
    seed: u64,
    preset: &str,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<TrainConfig> {
    let mode = Mode::parse(mode).map_err(err)?;
    let model = ModelConfig::preset(preset, mode).map_err(err)?;
    let schedules = if preset == "paper" { Schedules::paper(steps) } else { Schedules::desk(steps) };
    let cfg = TrainConfig { model, schedules, optimizer: AdaBelief::default(), seed };
    let Some(o) = overrides else { return Ok(cfg) };
    let mut value = serde_json::to_value(&cfg).map_err(json_err)?;
    merge(&mut value, from_py(o.as_any())?, "")?;
    let cfg: TrainConfig = serde_json::from_value(value).map_err(json_err)?;
    cfg.model.validate().map_err(err)?;
    Ok(cfg)
}

/// A model together with its optimizer state and step counter.
#[pyclass(module = "rpt")]
struct Trainer {
    state: TrainState,
}

#[pymethods]
impl Trainer {
    /// `overrides` is a nested dict over `{"model": ..., "schedules": ...,
    /// "optimizer": ...}`; see `config()` for the available keys.
    #[new]
    #[pyo3(signature = (mode = "rpt", steps = 1000, seed = 0, preset = "desk", overrides = None))]
    fn new(mode: &str, steps: u64, seed: u64, preset: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = train_config(mode, steps, seed, preset, overrides)?;
        Ok(Self { state: TrainState::new(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { state: checkpoint::load(&path, None).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.state, &path).map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.state.config)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    /// Fixes scheduled sampling at probability `p` of feeding gold neighbors,
    /// or restores the annealed schedule with `None`.
    #[pyo3(signature = (p = None))]
    fn set_sampling(&mut self, p: Option<f64>) -> PyResult<()> {
        self.state.config.schedules.sampling = match p {
            Some(p) if (0.0..=1.0).contains(&p) => SamplingSchedule::Fixed(p),
            Some(p) => return Err(PyValueError::new_err(format!("sampling probability {p} outside [0, 1]"))),
            None => SamplingSchedule::Anneal,
        };
        Ok(())
    }

    /// Runs `n` optimizer steps and returns the loss breakdown of each.
    #[pyo3(signature = (data, n = 1))]
    fn train<'py>(&mut self, py: Python<'py>, data: &Dataset, n: u64) -> PyResult<Bound<'py, PyAny>> {
        self.check_chunk_len(data)?;
        let mut log = Vec::with_capacity(n as usize);
        for _ in 0..n {
            log.push(self.state.train_step(&data.docs).map_err(err)?);
        }
        to_py(py, &log)
    }

    /// Evaluation report; `neighbors` is `own`, `oracle` or `none`.
    #[pyo3(signature = (data, neighbors = "own", ks = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        neighbors: &str,
        ks: Option<Vec<usize>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let which = match neighbors {
            "own" => EvalNeighbors::Own,
            "oracle" => EvalNeighbors::Oracle,
            "none" => EvalNeighbors::None,
            other => return Err(PyValueError::new_err(format!("unknown neighbor source {other}"))),
        };
        let ks = ks.unwrap_or_else(|| DEFAULT_KS.to_vec());
        if ks.iter().any(|&k| k == 0) {
            return Err(PyValueError::new_err("ks must be positive"));
        }
        let (report, _) = eval::evaluate(&self.state.model, &data.eval_docs(), which, &ks).map_err(err)?;
        to_py(py, &report)
    }

    /// Perplexity of one token sequence with the model's own neighbors.
    fn perplexity(&self, tokens: Vec<u32>) -> PyResult<f64> {
        let p = self.partition(tokens)?;
        eval::perplexity(&self.state.model, &p).map_err(err)
    }

    /// Neighbor chunk indices per chunk: the model's own retrievals for rpt,
    /// BM25 over the query chunk for retro, empty lists for txl.
    fn retrieve(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<usize>>> {
        let model = &self.state.model;
        let p = self.partition(tokens)?;
        let c = &model.config;
        Ok(match c.mode {
            Mode::Txl => vec![Vec::new(); p.num_chunks()],
            Mode::Retro => rpt_core::training::bm25_neighbors(&p, c.w, c.k, QueryForm::QueryOnly),
            Mode::Rpt => cached::run(model, &p.tokens, &NeighborSource::Retrieve).map_err(err)?.neighbors,
        })
    }
}

impl Trainer {
    fn partition(&self, tokens: Vec<u32>) -> PyResult<ChunkPartition> {
        let c = &self.state.model.config;
        let doc = corpus::Document::new("input", tokens, c.vocab_size).map_err(err)?;
        Ok(corpus::partition(&doc, c.m))
    }

    fn check_chunk_len(&self, data: &Dataset) -> PyResult<()> {
        let m = self.state.model.config.m;
        match data.docs.first() {
            Some(d) if d.partition.chunk_len != m => Err(PyValueError::new_err(format!(
                "dataset chunk length {} differs from the model's {m}",
                d.partition.chunk_len
            ))),
            _ => Ok(()),
        }
    }
}

#[pymodule]
fn rpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Document>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}

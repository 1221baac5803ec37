//! The pipeline stages. Each reads its inputs from the run directory, writes
//! its outputs there and freezes the effective config next to them.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use rpt_core::corpus::{ingest_dir, partition, ChunkPartition, Document};
use rpt_core::eval::analysis::{improvement_csv, max_target_csv, overlap_csv, overlap_rows, subgroup_csv};
use rpt_core::eval::{evaluate, improvement_report, subgroup_report, ChunkResult, EvalDoc, EvalNeighbors, EvalReport};
use rpt_core::lexical::QueryForm;
use rpt_core::model::Mode;
use rpt_core::supervision::{
    build_document_records, build_lexical_document_records, load_records, write_records, CacheLmScorer, CommandScorer,
    ModelScorer, RecordKind, ScoringProvider, SupervisionRecord, UniformScorer,
};
use rpt_core::training::{bm25_neighbors, checkpoint, TrainDoc, TrainState};
use rpt_core::{Result, RptError};

use crate::config::RunConfig;

pub const RUN_ROOT_ENV: &str = "RPT_RUN_ROOT";
pub const SPLITS: [&str; 2] = ["train", "test"];

/// Directory layout of one run under the run root.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub dir: PathBuf,
    /// Directory holding the ingested corpus and supervision records.
    pub data: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path, cfg: &RunConfig) -> Self {
        let data_run = cfg.data_run.as_deref().unwrap_or(&cfg.run_name);
        Self { root: root.to_path_buf(), dir: root.join(&cfg.run_name), data: root.join(data_run) }
    }

    pub fn docs(&self, split: &str) -> PathBuf {
        self.data.join("ingest").join(format!("{split}.docs.jsonl"))
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data.join("ingest").join(format!("{split}.manifest.jsonl"))
    }

    pub fn records(&self, split: &str) -> PathBuf {
        self.data.join("supervision").join(format!("{split}.records.jsonl"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("train").join("checkpoint.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("train").join("metrics.jsonl")
    }

    pub fn eval_dir(&self, neighbors: EvalNeighbors) -> PathBuf {
        let name = match neighbors {
            EvalNeighbors::Own => "own",
            EvalNeighbors::Oracle => "oracle",
            EvalNeighbors::None => "none",
        };
        self.dir.join("eval").join(name)
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.dir.join("analysis")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| RptError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| RptError::io(path, e))
}

fn freeze_config(stage_dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&stage_dir.join("config.toml"), cfg.to_toml())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_file(path, out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| RptError::io(path, e))?;
    let mut items = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| RptError::io(path, e))?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    Ok(items)
}

fn split_present(run: &RunDir, split: &str) -> bool {
    run.docs(split).exists()
}

fn load_partitions(run: &RunDir, cfg: &RunConfig, split: &str) -> Result<Vec<ChunkPartition>> {
    let m = cfg.model_config()?.m;
    let docs: Vec<Document> = read_jsonl(&run.docs(split))?;
    Ok(docs.iter().map(|d| partition(d, m)).collect())
}

fn load_split_records(run: &RunDir, split: &str) -> Result<Option<(RecordKind, Vec<SupervisionRecord>)>> {
    let path = run.records(split);
    if path.exists() {
        load_records(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn records_by_doc(parts: &[ChunkPartition], records: Vec<SupervisionRecord>) -> Vec<Vec<SupervisionRecord>> {
    let mut out = vec![Vec::new(); parts.len()];
    for r in records {
        if let Some(d) = parts.iter().position(|p| p.doc_id == r.doc_id) {
            out[d].push(r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub documents: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

/// Reads the corpus directories and writes documents plus partition manifests.
pub fn ingest(run: &RunDir, cfg: &RunConfig) -> Result<IngestSummary> {
    let tokenizer = cfg.tokenizer()?;
    let m = cfg.model_config()?.m;
    let train = cfg.train_corpus.as_ref().ok_or_else(|| RptError::Config("train_corpus is not set".into()))?;
    let mut summary = IngestSummary { documents: Vec::new(), warnings: Vec::new() };
    for (split, dir) in [("train", Some(train)), ("test", cfg.test_corpus.as_ref())] {
        let Some(dir) = dir else { continue };
        if !dir.is_dir() {
            return Err(RptError::Config(format!("corpus directory {} does not exist", dir.display())));
        }
        let docs = ingest_dir(dir, tokenizer)?;
        if docs.is_empty() {
            summary.warnings.push(format!("{split} corpus {} has no documents", dir.display()));
        }
        let manifests: Vec<_> = docs.iter().map(|d| partition(d, m).manifest()).collect();
        write_jsonl(&run.docs(split), &docs)?;
        write_jsonl(&run.manifest(split), &manifests)?;
        summary.documents.push((split.to_string(), docs.len()));
    }
    freeze_config(&run.data.join("ingest"), cfg)?;
    Ok(summary)
}

fn provider<'a>(
    cfg: &RunConfig,
    train_docs: &[Document],
    scorer_state: &'a Option<TrainState>,
) -> Result<Box<dyn ScoringProvider + 'a>> {
    let vocab = cfg.model_config()?.vocab_size;
    Ok(match cfg.provider.as_str() {
        "uniform" => Box::new(UniformScorer { vocab_size: vocab }),
        "cache-lm" => Box::new(CacheLmScorer::train(train_docs, vocab, cfg.cache_weight)),
        "command" => {
            let cmd = cfg
                .scorer_command
                .as_deref()
                .ok_or_else(|| RptError::Config("provider = command needs scorer_command".into()))?;
            Box::new(CommandScorer::new(cmd)?)
        }
        "model" => {
            let state = scorer_state.as_ref().expect("scorer checkpoint loaded for the model provider");
            Box::new(ModelScorer { model: &state.model })
        }
        other => return Err(RptError::Config(format!("unknown provider {other}"))),
    })
}

/// Builds supervision records for every ingested split.
pub fn build_supervision(run: &RunDir, cfg: &RunConfig) -> Result<Vec<(String, usize)>> {
    let mc = cfg.model_config()?;
    let train_docs: Vec<Document> = read_jsonl(&run.docs("train"))?;
    let scorer_state = match cfg.provider.as_str() {
        "model" => {
            let path = cfg.scorer_checkpoint.as_ref().ok_or_else(|| {
                RptError::Config("provider = model needs scorer_checkpoint, the checkpoint of a trained txl run".into())
            })?;
            let state = checkpoint::load(path, None)?;
            if state.model.config.m != mc.m {
                return Err(RptError::ConfigMismatch(format!(
                    "scorer chunk length {} differs from {}",
                    state.model.config.m, mc.m
                )));
            }
            Some(state)
        }
        _ => None,
    };
    let kind = if cfg.record_kind == "lexical" { RecordKind::Lexical } else { RecordKind::Semantic };
    let provider = provider(cfg, &train_docs, &scorer_state)?;
    let mut counts = Vec::new();
    for split in SPLITS.iter().filter(|s| split_present(run, s)) {
        let mut records = Vec::new();
        for p in load_partitions(run, cfg, split)? {
            records.extend(match kind {
                RecordKind::Semantic => build_document_records(provider.as_ref(), &p, mc.w, cfg.bm25(), cfg.n_cand)?,
                RecordKind::Lexical => build_lexical_document_records(&p, mc.w, cfg.bm25(), cfg.n_pos),
            });
        }
        let path = run.records(split);
        create_dir(path.parent().expect("records live in a directory"))?;
        let f = fs::File::create(&path).map_err(|e| RptError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_records(&mut w, kind, &records)?;
        w.flush().map_err(|e| RptError::io(&path, e))?;
        counts.push((split.to_string(), records.len()));
    }
    freeze_config(&run.data.join("supervision"), cfg)?;
    Ok(counts)
}

fn train_docs(run: &RunDir, cfg: &RunConfig, mode: Mode) -> Result<Vec<TrainDoc>> {
    let parts = load_partitions(run, cfg, "train")?;
    let records = match (mode, load_split_records(run, "train")?) {
        (Mode::Rpt, None) => {
            return Err(RptError::Precondition(format!(
                "rpt training needs supervision records at {}",
                run.records("train").display()
            )))
        }
        (Mode::Rpt, Some((_, recs))) => records_by_doc(&parts, recs),
        _ => vec![Vec::new(); parts.len()],
    };
    parts.into_iter().zip(records).map(|(p, r)| TrainDoc::new(p, r)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub last: Option<rpt_core::training::LossBreakdown>,
}

/// Trains to `steps` (or stops early at `until`), streaming per-step metrics.
/// With `resume`, continues from the saved checkpoint, which must match the
/// effective config.
pub fn train(run: &RunDir, cfg: &RunConfig, resume: bool, until: Option<u64>) -> Result<TrainSummary> {
    let tc = cfg.train_config()?;
    let docs = train_docs(run, cfg, tc.model.mode)?;
    let ckpt = run.checkpoint();
    let mut state = if resume { checkpoint::load(&ckpt, Some(&tc))? } else { TrainState::new(tc.clone())? };
    let start_step = state.step;
    let metrics_path = run.metrics();
    // keep only the metric lines that precede the resume point
    let mut kept = String::new();
    if resume && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| RptError::io(&metrics_path, e))?;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s < start_step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    write_file(&metrics_path, kept)?;
    freeze_config(&run.dir.join("train"), cfg)?;
    let f = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| RptError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(f);
    let mut last = None;
    let end = until.map_or(tc.schedules.total_steps, |u| u.min(tc.schedules.total_steps));
    while state.step < end {
        let b = state.train_step(&docs)?;
        if cfg.log_every > 0 && (b.step % cfg.log_every == 0 || state.step == tc.schedules.total_steps) {
            writeln!(metrics, "{}", serde_json::to_string(&b)?).map_err(|e| RptError::io(&metrics_path, e))?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            metrics.flush().map_err(|e| RptError::io(&metrics_path, e))?;
            checkpoint::save(&state, &ckpt)?;
        }
        last = Some(b);
    }
    metrics.flush().map_err(|e| RptError::io(&metrics_path, e))?;
    checkpoint::save(&state, &ckpt)?;
    Ok(TrainSummary { start_step, end_step: state.step, last })
}

fn load_model_state(run: &RunDir, cfg: &RunConfig) -> Result<TrainState> {
    let state = checkpoint::load(&run.checkpoint(), None)?;
    let expected = cfg.model_config()?;
    if state.model.config != expected {
        return Err(RptError::ConfigMismatch(format!(
            "checkpoint {} was trained with a different model config",
            run.checkpoint().display()
        )));
    }
    Ok(state)
}

fn eval_docs(run: &RunDir, cfg: &RunConfig) -> Result<Vec<EvalDoc>> {
    let split = if split_present(run, "test") { "test" } else { "train" };
    let parts = load_partitions(run, cfg, split)?;
    let records = match load_split_records(run, split)? {
        Some((RecordKind::Semantic, recs)) => records_by_doc(&parts, recs),
        _ => vec![Vec::new(); parts.len()],
    };
    Ok(parts.into_iter().zip(records).map(|(partition, records)| EvalDoc { partition, records }).collect())
}

/// Evaluates the trained checkpoint on the test split (the train split when
/// no test corpus was ingested).
pub fn eval(run: &RunDir, cfg: &RunConfig) -> Result<EvalReport> {
    let state = load_model_state(run, cfg)?;
    let docs = eval_docs(run, cfg)?;
    let neighbors = cfg.eval_neighbors()?;
    let (report, chunks) = evaluate(&state.model, &docs, neighbors, &cfg.ks)?;
    let dir = run.eval_dir(neighbors);
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_jsonl(&dir.join("chunks.jsonl"), &chunks)?;
    freeze_config(&dir, cfg)?;
    Ok(report)
}

/// Writes the overlap, improvement, max-target and subgroup tables.
pub fn analyze(run: &RunDir, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let state = load_model_state(run, cfg)?;
    let model = &state.model;
    let docs = eval_docs(run, cfg)?;
    let (_, chunks) = evaluate(model, &docs, EvalNeighbors::Own, &cfg.ks)?;
    let baseline: Vec<ChunkResult> = match &cfg.baseline_run {
        Some(name) => {
            let path = run.root.join(name).join("eval").join("own").join("chunks.jsonl");
            read_jsonl(&path)?
        }
        None => evaluate(model, &docs, EvalNeighbors::None, &cfg.ks)?.1,
    };
    let improvement = improvement_report(&chunks, &baseline)?;
    let subgroups = subgroup_report(&chunks, &baseline)?;

    let mc = &model.config;
    let mut overlap = Vec::new();
    let mut all_records = Vec::new();
    for doc in &docs {
        let bm25 = bm25_neighbors(&doc.partition, mc.w, mc.k, QueryForm::QueryOnly);
        for r in &doc.records {
            let own: &[usize] =
                chunks.iter().find(|c| c.doc_id == r.doc_id && c.chunk == r.query_index).map_or(&[], |c| &c.neighbors);
            if mc.mode.uses_neighbors() {
                overlap.extend(overlap_rows(&doc.partition, r, mc.mode.as_str(), own));
            }
            overlap.extend(overlap_rows(&doc.partition, r, "bm25", &bm25[r.query_index]));
        }
        all_records.extend(doc.records.iter().cloned());
    }
    let max_k = cfg.ks.iter().copied().max().unwrap_or(1);
    let ks: Vec<usize> = (1..=max_k).collect();

    let dir = run.analysis_dir();
    let outputs = [
        ("overlap.csv", overlap_csv(&overlap)),
        ("improvement.csv", improvement_csv(&improvement)),
        ("max_target.csv", max_target_csv(&all_records, &ks)),
        ("subgroup.csv", subgroup_csv(&subgroups)),
    ];
    let mut written = Vec::new();
    for (name, body) in outputs {
        let path = dir.join(name);
        write_file(&path, body)?;
        written.push(path);
    }
    write_file(&dir.join("improvement.json"), serde_json::to_string_pretty(&improvement)?)?;
    write_file(&dir.join("subgroup.json"), serde_json::to_string_pretty(&subgroups)?)?;
    freeze_config(&dir, cfg)?;
    Ok(written)
}

/// Writes a synthetic corpus as text files under `out/train` and `out/test`.
pub fn gen_synthetic(out: &Path, train_docs: usize, test_docs: usize, seed: u64) -> Result<()> {
    use rpt_core::synthetic::{generate_corpus, Layout};
    for (split, n, s) in [("train", train_docs, seed), ("test", test_docs, seed ^ 0x7e57)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        for d in generate_corpus(split, n, Layout::default(), s) {
            let bytes: Vec<u8> = d.document.tokens.iter().map(|&t| t as u8).collect();
            write_file(&dir.join(format!("{}.txt", d.document.id)), bytes)?;
        }
    }
    Ok(())
}

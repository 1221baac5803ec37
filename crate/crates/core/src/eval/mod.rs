//! Perplexity with cached sliding-window inference, retrieval quality against
//! gold labels, oracle evaluation and per-chunk comparison reports.

pub mod analysis;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::corpus::{retrievable_set, ChunkPartition};
use crate::error::{Result, RptError};
use crate::lexical::{top_candidates, Bm25Params, QueryForm};
use crate::model::cached::{self, CachedOutput};
use crate::model::{next_token_targets, Mode, Model, NeighborSource, Session};
use crate::supervision::{oracle_neighbors, SupervisionRecord};
use crate::training::bm25_neighbors;

use metrics::{ndcg_at_k, precision_recall_at_k, rank_by};

/// Default cutoffs for retrieval metrics.
pub const DEFAULT_KS: [usize; 3] = [2, 10, 20];

/// Which neighbors the model sees during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalNeighbors {
    /// The mode's own inference-time retrieval (BM25 on the query chunk for
    /// retro, the learned retriever for rpt).
    Own,
    /// Top-K gold positives from the supervision records.
    Oracle,
    /// No neighbors at all.
    None,
}

/// A document to evaluate together with its (semantic) supervision records.
#[derive(Debug, Clone)]
pub struct EvalDoc {
    pub partition: ChunkPartition,
    pub records: Vec<SupervisionRecord>,
}

impl EvalDoc {
    pub fn record(&self, i: usize) -> Option<&SupervisionRecord> {
        self.records.iter().find(|r| r.query_index == i)
    }
}

pub fn neighbor_source(model: &Model, doc: &EvalDoc, which: EvalNeighbors) -> NeighborSource {
    let c = &model.config;
    match (which, c.mode) {
        (_, Mode::Txl) | (EvalNeighbors::None, _) => NeighborSource::None,
        (EvalNeighbors::Own, Mode::Retro) => {
            NeighborSource::Given(bm25_neighbors(&doc.partition, c.w, c.k, QueryForm::QueryOnly))
        }
        (EvalNeighbors::Own, Mode::Rpt) => NeighborSource::Retrieve,
        (EvalNeighbors::Oracle, _) => NeighborSource::Given(
            (0..doc.partition.num_chunks())
                .map(|i| doc.record(i).map(|r| oracle_neighbors(r, c.k)).unwrap_or_default())
                .collect(),
        ),
    }
}

/// Per-token NLL of a document from cached span-by-span inference.
pub fn document_nll(model: &Model, tokens: &[u32], source: &NeighborSource) -> Result<CachedOutput> {
    cached::run(model, tokens, source)
}

/// Per-token NLL from a single uncached forward over the whole document.
pub fn full_recompute_nll(model: &Model, tokens: &[u32], source: &NeighborSource) -> Result<Vec<f64>> {
    let mut s = Session::new(model, None);
    let out = model.forward(&mut s, tokens, source)?;
    let logits = s.value(out.logits);
    Ok(next_token_targets(tokens)
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| cached::token_nll(logits.row(p), t)))
        .collect())
}

/// Perplexity of one document under the model's own retrieval.
pub fn perplexity(model: &Model, partition: &ChunkPartition) -> Result<f64> {
    let doc = EvalDoc { partition: partition.clone(), records: Vec::new() };
    let source = neighbor_source(model, &doc, EvalNeighbors::Own);
    Ok(document_nll(model, &partition.tokens, &source)?.mean_nll().exp())
}

/// One line of the per-chunk output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkResult {
    pub doc_id: String,
    pub chunk: usize,
    /// Mean NLL of the tokens of this chunk that have a prediction.
    pub nll: f64,
    pub tokens: usize,
    /// Neighbors retrieved with this chunk as the query.
    pub neighbors: Vec<usize>,
    /// Whether the neighbors used to predict this chunk include a gold positive
    /// (`None` when the preceding chunk has no record).
    pub gold_retrieved: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    /// `model` (learned retriever) or `bm25` (query-chunk BM25).
    pub retriever: String,
    /// `candidates` (the record's scored pool) or `retrievable` (all prior chunks).
    pub pool: String,
    pub records: usize,
    pub k: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub ndcg_binary: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub neighbors: EvalNeighbors,
    pub documents: usize,
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub retrieval: Vec<RetrievalSummary>,
}

#[derive(Default)]
struct MetricAcc {
    n: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    ndcg: Vec<f64>,
    ndcg_bin: Vec<f64>,
}

impl MetricAcc {
    fn add(&mut self, ranking: &[usize], record: &SupervisionRecord, pool: &[usize], ks: &[usize]) {
        if self.p.is_empty() {
            *self = MetricAcc { n: 0, p: vec![0.0; ks.len()], r: vec![0.0; ks.len()], ..Default::default() };
            self.ndcg = vec![0.0; ks.len()];
            self.ndcg_bin = vec![0.0; ks.len()];
        }
        let graded = |j: usize| record.target_of(j).map_or(0.0, |t| t.max(0.0));
        let binary = |j: usize| if record.is_positive(j) { 1.0 } else { 0.0 };
        for (x, &k) in ks.iter().enumerate() {
            let (p, r) = precision_recall_at_k(ranking, &record.positives, k);
            self.p[x] += p;
            self.r[x] += r;
            self.ndcg[x] += ndcg_at_k(ranking, graded, pool, k);
            self.ndcg_bin[x] += ndcg_at_k(ranking, binary, pool, k);
        }
        self.n += 1;
    }

    fn summary(self, retriever: &str, pool: &str, ks: &[usize]) -> RetrievalSummary {
        let n = self.n.max(1) as f64;
        let avg = |v: Vec<f64>| if v.is_empty() { vec![0.0; ks.len()] } else { v.iter().map(|x| x / n).collect() };
        RetrievalSummary {
            retriever: retriever.into(),
            pool: pool.into(),
            records: self.n,
            k: ks.to_vec(),
            precision: avg(self.p),
            recall: avg(self.r),
            ndcg: avg(self.ndcg),
            ndcg_binary: avg(self.ndcg_bin),
        }
    }
}

/// Full evaluation of a corpus: perplexity, per-chunk results, and retrieval
/// metrics of the learned retriever (rpt) and of query-chunk BM25.
pub fn evaluate(
    model: &Model,
    docs: &[EvalDoc],
    which: EvalNeighbors,
    ks: &[usize],
) -> Result<(EvalReport, Vec<ChunkResult>)> {
    let c = &model.config;
    let mut chunks = Vec::new();
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let mut accs: [MetricAcc; 4] = Default::default();
    for doc in docs {
        let p = &doc.partition;
        if p.chunk_len != c.m {
            return Err(RptError::PartitionMismatch(format!(
                "{} is chunked with m={} but the model uses m={}",
                p.doc_id, p.chunk_len, c.m
            )));
        }
        let source = neighbor_source(model, doc, which);
        let out = document_nll(model, &p.tokens, &source)?;
        total_nll += out.nll.iter().sum::<f64>();
        total_tokens += out.nll.len();
        for i in 0..p.num_chunks() {
            let lo = (i * c.m).max(1);
            let hi = (i + 1) * c.m;
            let span = &out.nll[lo - 1..hi - 1];
            let neighbors = out.neighbors.get(i).cloned().unwrap_or_default();
            let gold_retrieved = i
                .checked_sub(1)
                .and_then(|q| doc.record(q).map(|r| (q, r)))
                .map(|(q, r)| out.neighbors.get(q).is_some_and(|n| n.iter().any(|j| r.is_positive(*j))));
            chunks.push(ChunkResult {
                doc_id: p.doc_id.clone(),
                chunk: i,
                nll: if span.is_empty() { 0.0 } else { span.iter().sum::<f64>() / span.len() as f64 },
                tokens: span.len(),
                neighbors,
                gold_retrieved,
            });
        }
        for r in doc.records.iter().filter(|r| !r.candidates.is_empty()) {
            let i = r.query_index;
            let cands: Vec<usize> = r.candidates.iter().map(|c| c.index).collect();
            let allowed = retrievable_set(i, c.w);
            let all: Vec<usize> = allowed.members.clone().collect();
            let bm25 = top_candidates(p, &allowed, QueryForm::QueryOnly, Bm25Params::default(), usize::MAX);
            let bm25_score = |j: usize| bm25.candidates.iter().find(|x| x.0 == j).map_or(0.0, |x| x.1);
            accs[2].add(&rank_by(&cands, bm25_score), r, &cands, ks);
            accs[3].add(&bm25.indices(), r, &all, ks);
            if let Some(row) = out.scores.get(i) {
                accs[0].add(&rank_by(&cands, |j| row[j]), r, &cands, ks);
                accs[1].add(&rank_by(&all, |j| row[j]), r, &all, ks);
            }
        }
    }
    let [a0, a1, a2, a3] = accs;
    let mut retrieval = Vec::new();
    if c.mode == Mode::Rpt && a0.n > 0 {
        retrieval.push(a0.summary("model", "candidates", ks));
        retrieval.push(a1.summary("model", "retrievable", ks));
    }
    if a2.n > 0 {
        retrieval.push(a2.summary("bm25", "candidates", ks));
        retrieval.push(a3.summary("bm25", "retrievable", ks));
    }
    let mean_nll = if total_tokens == 0 { 0.0 } else { total_nll / total_tokens as f64 };
    let report = EvalReport {
        mode: c.mode,
        neighbors: which,
        documents: docs.len(),
        tokens: total_tokens,
        mean_nll,
        perplexity: mean_nll.exp(),
        retrieval,
    };
    Ok((report, chunks))
}

/// Perplexity with neighbors replaced by the top-K gold positives.
pub fn oracle_eval(model: &Model, docs: &[EvalDoc]) -> Result<EvalReport> {
    Ok(evaluate(model, docs, EvalNeighbors::Oracle, &DEFAULT_KS)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    /// `(nll_b - nll_a) / nll_b` per chunk with predicted tokens.
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub skew: f64,
    pub histogram: Vec<HistogramBin>,
}

const HIST_BINS: usize = 20;

fn summarize(values: Vec<f64>) -> ImprovementReport {
    let n = values.len() as f64;
    let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        l if l % 2 == 1 => sorted[l / 2],
        l => 0.5 * (sorted[l / 2 - 1] + sorted[l / 2]),
    };
    let var = if values.is_empty() { 0.0 } else { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n };
    let skew = if var > 0.0 { values.iter().map(|v| ((v - mean) / var.sqrt()).powi(3)).sum::<f64>() / n } else { 0.0 };
    let width = 2.0 / HIST_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..HIST_BINS)
        .map(|b| HistogramBin { lo: -1.0 + b as f64 * width, hi: -1.0 + (b + 1) as f64 * width, count: 0 })
        .collect();
    for v in &values {
        let b = (((v + 1.0) / width).floor().max(0.0) as usize).min(HIST_BINS - 1);
        histogram[b].count += 1;
    }
    ImprovementReport { values, mean, median, skew, histogram }
}

/// Relative per-chunk improvement of `a` over `b`; values outside [-1, 1]
/// land in the edge bins of the histogram.
pub fn improvement_report(a: &[ChunkResult], b: &[ChunkResult]) -> Result<ImprovementReport> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.doc_id != y.doc_id || x.chunk != y.chunk) {
        return Err(RptError::PartitionMismatch("per-chunk results cover different chunks".into()));
    }
    let values = a
        .iter()
        .zip(b)
        .filter(|(x, _)| x.tokens > 0)
        .map(|(x, y)| if y.nll == 0.0 { 0.0 } else { (y.nll - x.nll) / y.nll })
        .collect();
    Ok(summarize(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub count: usize,
    pub mean_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    /// Chunks whose neighbors included a gold positive; absent when empty.
    pub with_gold: Option<SubgroupStats>,
    pub without_gold: Option<SubgroupStats>,
    pub labelled: usize,
}

/// Improvement of `model` over `baseline`, split by whether the model retrieved
/// a gold positive for the chunk.
pub fn subgroup_report(model: &[ChunkResult], baseline: &[ChunkResult]) -> Result<SubgroupReport> {
    let imp = improvement_report(model, baseline)?;
    let mut groups = [(0usize, 0.0f64), (0, 0.0)];
    let mut it = imp.values.iter();
    for x in model.iter().filter(|x| x.tokens > 0) {
        let v = *it.next().expect("one value per chunk");
        if let Some(g) = x.gold_retrieved {
            let e = &mut groups[usize::from(!g)];
            e.0 += 1;
            e.1 += v;
        }
    }
    let stats = |(n, s): (usize, f64)| (n > 0).then(|| SubgroupStats { count: n, mean_improvement: s / n as f64 });
    Ok(SubgroupReport {
        with_gold: stats(groups[0]),
        without_gold: stats(groups[1]),
        labelled: groups[0].0 + groups[1].0,
    })
}

#[cfg(test)]
mod tests;

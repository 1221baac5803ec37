//! Retriever supervision: target-based scores from a reference scoring LM,
//! positive sets, gold rankings and the record files that carry them.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::{retrievable_set, ChunkPartition, Document, RetrievableSet};
use crate::error::{Result, RptError};
use crate::lexical::{top_candidates, Bm25Params, QueryForm};

/// Number of BM25 candidates rescored per query chunk.
pub const N_CAND: usize = 20;

pub const SCORE_REQUEST_FORMAT: &str = "rpt-score-requests";
pub const SCORE_RESPONSE_FORMAT: &str = "rpt-score-responses";
pub const RECORDS_FORMAT: &str = "rpt-supervision";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context_ids: Vec<u32>,
    pub continuation_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprob: f64,
}

/// A reference LM: `log P(continuation | context)`, finite, `<= 0`, deterministic.
pub trait ScoringProvider {
    fn log_prob(&self, context: &[u32], continuation: &[u32]) -> Result<f64>;

    fn log_prob_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>> {
        requests.iter().map(|r| self.log_prob(&r.context_ids, &r.continuation_ids)).collect()
    }
}

fn check_logprob(lp: f64) -> Result<f64> {
    if lp.is_finite() && lp <= 0.0 {
        Ok(lp)
    } else {
        Err(RptError::Provider(format!("invalid log-probability {lp}")))
    }
}

/// Context-free uniform distribution over the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl ScoringProvider for UniformScorer {
    fn log_prob(&self, _context: &[u32], continuation: &[u32]) -> Result<f64> {
        Ok(-(continuation.len() as f64) * (self.vocab_size as f64).ln())
    }
}

/// Smoothed bigram LM interpolated with a bigram cache over the visible
/// history (context plus already-scored continuation tokens). The cache only
/// speaks when the previous token has a successor in the history, so a
/// context helps exactly when it contains the transitions of the continuation.
#[derive(Debug, Clone)]
pub struct CacheLmScorer {
    vocab_size: usize,
    unigram: Vec<f64>,
    bigram: HashMap<(u32, u32), f64>,
    prev_totals: Vec<f64>,
    backoff: f64,
    cache_weight: f64,
}

impl CacheLmScorer {
    pub fn train(docs: &[Document], vocab_size: usize, cache_weight: f64) -> Self {
        let mut uni = vec![1.0; vocab_size];
        let mut bigram: HashMap<(u32, u32), f64> = HashMap::new();
        let mut prev_totals = vec![0.0; vocab_size];
        for d in docs {
            for (i, &t) in d.tokens.iter().enumerate() {
                uni[t as usize] += 1.0;
                if i > 0 {
                    let p = d.tokens[i - 1];
                    *bigram.entry((p, t)).or_default() += 1.0;
                    prev_totals[p as usize] += 1.0;
                }
            }
        }
        let total: f64 = uni.iter().sum();
        let unigram = uni.into_iter().map(|c| c / total).collect();
        Self { vocab_size, unigram, bigram, prev_totals, backoff: 2.0, cache_weight }
    }

    fn background(&self, prev: Option<u32>, t: u32) -> f64 {
        let pu = self.unigram[t as usize];
        match prev {
            None => pu,
            Some(p) => {
                let c = self.bigram.get(&(p, t)).copied().unwrap_or(0.0);
                (c + self.backoff * pu) / (self.prev_totals[p as usize] + self.backoff)
            }
        }
    }
}

impl ScoringProvider for CacheLmScorer {
    fn log_prob(&self, context: &[u32], continuation: &[u32]) -> Result<f64> {
        let mut counts = vec![0u32; self.vocab_size];
        let mut pairs: HashMap<(u32, u32), u32> = HashMap::new();
        for (i, &t) in context.iter().enumerate() {
            counts[t as usize] += 1;
            if i > 0 {
                *pairs.entry((context[i - 1], t)).or_default() += 1;
            }
        }
        let mut prev = context.last().copied();
        let mut lp = 0.0;
        for &t in continuation {
            let bg = self.background(prev, t);
            // `prev` is the last history token, so all but one of its occurrences have a successor
            let followers = prev.map_or(0, |q| counts[q as usize].saturating_sub(1));
            let p = match prev {
                Some(q) if followers > 0 => {
                    let cache = pairs.get(&(q, t)).copied().unwrap_or(0) as f64 / followers as f64;
                    (1.0 - self.cache_weight) * bg + self.cache_weight * cache
                }
                _ => bg,
            };
            lp += p.ln();
            counts[t as usize] += 1;
            if let Some(q) = prev {
                *pairs.entry((q, t)).or_default() += 1;
            }
            prev = Some(t);
        }
        check_logprob(lp)
    }
}

/// A trained model used as the reference LM, always without neighbors.
pub struct ModelScorer<'a> {
    pub model: &'a crate::model::Model,
}

impl ScoringProvider for ModelScorer<'_> {
    fn log_prob(&self, context: &[u32], continuation: &[u32]) -> Result<f64> {
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(continuation);
        // the first token of an empty context has no prediction; score it uniformly
        let mut lp = if context.is_empty() && !continuation.is_empty() {
            -(self.model.config.vocab_size as f64).ln()
        } else {
            0.0
        };
        if tokens.len() >= 2 {
            let out = crate::model::cached::run(self.model, &tokens, &crate::model::NeighborSource::None)?;
            let first = context.len().max(1) - 1;
            lp -= out.nll[first..].iter().sum::<f64>();
        }
        check_logprob(lp)
    }
}

/// External scorer speaking the line protocol over stdin/stdout: one header
/// line then one JSON request per line in; one header line then one
/// `{"logprob": x}` per line out.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandScorer {
    pub fn new(command_line: &str) -> Result<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| RptError::Provider("empty scorer command".into()))?;
        Ok(Self { program, args: parts.collect() })
    }
}

impl ScoringProvider for CommandScorer {
    fn log_prob(&self, context: &[u32], continuation: &[u32]) -> Result<f64> {
        let req = ScoreRequest { context_ids: context.to_vec(), continuation_ids: continuation.to_vec() };
        Ok(self.log_prob_batch(std::slice::from_ref(&req))?[0])
    }

    fn log_prob_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| RptError::Provider(format!("cannot start {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = {
            let mut buf = Vec::new();
            write_requests(&mut buf, requests)?;
            buf
        };
        let writer = std::thread::spawn(move || stdin.write_all(&payload));
        let stdout = child.stdout.take().expect("piped stdout");
        let responses = read_responses(BufReader::new(stdout));
        let status = child.wait().map_err(|e| RptError::Provider(e.to_string()))?;
        writer
            .join()
            .map_err(|_| RptError::Provider("writer thread panicked".into()))?
            .map_err(|e| RptError::Provider(format!("writing requests: {e}")))?;
        if !status.success() {
            return Err(RptError::Provider(format!("{} exited with {status}", self.program)));
        }
        let responses = responses?;
        if responses.len() != requests.len() {
            return Err(RptError::Provider(format!("expected {} responses, got {}", requests.len(), responses.len())));
        }
        responses.into_iter().map(check_logprob).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<RecordKind>,
}

fn check_header(line: &str, format: &str) -> Result<Header> {
    let h: Header = serde_json::from_str(line)?;
    if h.format != format {
        return Err(RptError::Format(format!("expected {format} header, found {}", h.format)));
    }
    if h.version != FORMAT_VERSION {
        return Err(RptError::Version { expected: FORMAT_VERSION, found: h.version });
    }
    Ok(h)
}

pub fn write_requests<W: Write>(mut w: W, requests: &[ScoreRequest]) -> Result<()> {
    let header = Header { format: SCORE_REQUEST_FORMAT.into(), version: FORMAT_VERSION, kind: None };
    let io = |e| RptError::Provider(format!("write: {e}"));
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for r in requests {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_requests<R: BufRead>(r: R) -> Result<Vec<ScoreRequest>> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| RptError::Format("missing header".into()))?;
    check_header(&first.map_err(|e| RptError::Format(e.to_string()))?, SCORE_REQUEST_FORMAT)?;
    lines.map(|l| Ok(serde_json::from_str(&l.map_err(|e| RptError::Format(e.to_string()))?)?)).collect()
}

pub fn write_responses<W: Write>(mut w: W, logprobs: &[f64]) -> Result<()> {
    let header = Header { format: SCORE_RESPONSE_FORMAT.into(), version: FORMAT_VERSION, kind: None };
    let io = |e| RptError::Provider(format!("write: {e}"));
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for &logprob in logprobs {
        writeln!(w, "{}", serde_json::to_string(&ScoreResponse { logprob })?).map_err(io)?;
    }
    Ok(())
}

pub fn read_responses<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let first = lines.next().ok_or_else(|| RptError::Provider("scorer produced no output".into()))?;
    check_header(&first.map_err(|e| RptError::Format(e.to_string()))?, SCORE_RESPONSE_FORMAT)?;
    lines
        .map(|l| {
            let resp: ScoreResponse = serde_json::from_str(&l.map_err(|e| RptError::Format(e.to_string()))?)?;
            Ok(resp.logprob)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// Positives are candidates whose target-based score is positive.
    Semantic,
    /// Positives are the top BM25 chunks for `(c_q, c_t)`; scores are BM25 values.
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub bm25: f64,
    /// Target-based score for semantic records, BM25 score for lexical ones.
    pub target: f64,
}

/// Supervision for one query chunk. Candidates are kept in BM25 order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub doc_id: String,
    pub query_index: usize,
    pub kind: RecordKind,
    pub candidates: Vec<CandidateScore>,
    pub positives: Vec<usize>,
    pub gold: Vec<usize>,
}

impl SupervisionRecord {
    pub fn is_positive(&self, j: usize) -> bool {
        self.positives.contains(&j)
    }

    pub fn target_of(&self, j: usize) -> Option<f64> {
        self.candidates.iter().find(|c| c.index == j).map(|c| c.target)
    }
}

/// Candidates a semantic record may score for query chunk `i`: retrievable,
/// and with the successor chunk `j+1` strictly before the query chunk.
pub fn candidate_pool(i: usize, w: usize) -> RetrievableSet {
    let r = retrievable_set(i, w);
    RetrievableSet { query_index: i, members: 0..r.members.end.min(i.saturating_sub(1)) }
}

/// Query chunks that receive a record: local context `(c_{i-2}, c_{i-1})` and
/// a target exist, and at least one candidate lies outside the local context.
pub fn eligible_queries(num_chunks: usize, w: usize) -> Range<usize> {
    let start = w.max(3);
    start..num_chunks.saturating_sub(1).max(start)
}

fn check_target_preconditions(partition: &ChunkPartition, i: usize, j: usize) -> Result<()> {
    let n = partition.num_chunks();
    if i < 2 || i + 1 >= n {
        return Err(RptError::Precondition(format!(
            "query chunk {i} needs two preceding chunks and a target ({n} chunks)"
        )));
    }
    if j + 2 > i {
        return Err(RptError::Precondition(format!("candidate {j} and its successor must precede query chunk {i}")));
    }
    Ok(())
}

fn concat(parts: &[&[u32]]) -> Vec<u32> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn candidate_request(partition: &ChunkPartition, i: usize, j: usize) -> ScoreRequest {
    ScoreRequest {
        context_ids: concat(&[partition.chunk_tokens(j), partition.chunk_tokens(j + 1), partition.chunk_tokens(i)]),
        continuation_ids: partition.chunk_tokens(i + 1).to_vec(),
    }
}

/// `s_t(j) = log P(c_t | c_j, c_{j+1}, c_q) - log P(c_t | c_{i-2}, c_{i-1}, c_q)`.
pub fn target_score(provider: &dyn ScoringProvider, partition: &ChunkPartition, i: usize, j: usize) -> Result<f64> {
    check_target_preconditions(partition, i, j)?;
    let num = candidate_request(partition, i, j);
    let den = candidate_request(partition, i, i - 2);
    let lps = provider.log_prob_batch(&[num, den])?;
    Ok(lps[0] - lps[1])
}

/// Score every candidate and derive the positive set and gold ranking.
pub fn build_record(
    provider: &dyn ScoringProvider,
    partition: &ChunkPartition,
    i: usize,
    candidates: &[(usize, f64)],
) -> Result<SupervisionRecord> {
    for &(j, _) in candidates {
        check_target_preconditions(partition, i, j)?;
    }
    let mut requests: Vec<ScoreRequest> = candidates.iter().map(|&(j, _)| candidate_request(partition, i, j)).collect();
    if i >= 2 {
        requests.push(candidate_request(partition, i, i - 2));
    }
    let lps = provider.log_prob_batch(&requests)?;
    let base = *lps.last().expect("denominator request");
    let scored: Vec<CandidateScore> = candidates
        .iter()
        .zip(&lps)
        .map(|(&(index, bm25), &lp)| CandidateScore { index, bm25, target: lp - base })
        .collect();
    Ok(assemble(partition.doc_id.clone(), i, RecordKind::Semantic, scored, |c| c.target > 0.0))
}

fn assemble(
    doc_id: String,
    query_index: usize,
    kind: RecordKind,
    candidates: Vec<CandidateScore>,
    positive: impl Fn(&CandidateScore) -> bool,
) -> SupervisionRecord {
    let mut order: Vec<(usize, f64)> = candidates.iter().map(|c| (c.index, c.target)).collect();
    crate::lexical::rank_desc(&mut order);
    let gold: Vec<usize> = order.iter().map(|o| o.0).collect();
    let positives: Vec<usize> =
        gold.iter().copied().filter(|j| candidates.iter().any(|c| c.index == *j && positive(c))).collect();
    SupervisionRecord { doc_id, query_index, kind, candidates, positives, gold }
}

/// Lexical supervision: every chunk of the candidate pool is a candidate, the
/// top `n_pos` by `(c_q, c_t)` BM25 score are positive, gold follows BM25.
pub fn build_lexical_record(
    partition: &ChunkPartition,
    i: usize,
    w: usize,
    params: Bm25Params,
    n_pos: usize,
) -> SupervisionRecord {
    let pool = candidate_pool(i, w);
    let cands = top_candidates(partition, &pool, QueryForm::QueryAndTarget, params, usize::MAX);
    let top: Vec<usize> = cands.candidates.iter().take(n_pos).map(|c| c.0).collect();
    let scored = cands.candidates.iter().map(|&(index, s)| CandidateScore { index, bm25: s, target: s }).collect();
    assemble(partition.doc_id.clone(), i, RecordKind::Lexical, scored, |c| top.contains(&c.index))
}

/// Semantic records for every eligible query chunk of one partition.
pub fn build_document_records(
    provider: &dyn ScoringProvider,
    partition: &ChunkPartition,
    w: usize,
    params: Bm25Params,
    n_cand: usize,
) -> Result<Vec<SupervisionRecord>> {
    let queries = eligible_queries(partition.num_chunks(), w);
    let mut requests = Vec::new();
    let mut layout = Vec::new();
    for i in queries {
        let pool = candidate_pool(i, w);
        let cands = top_candidates(partition, &pool, QueryForm::QueryAndTarget, params, n_cand);
        let start = requests.len();
        requests.extend(cands.candidates.iter().map(|&(j, _)| candidate_request(partition, i, j)));
        requests.push(candidate_request(partition, i, i - 2));
        layout.push((i, cands.candidates, start));
    }
    let lps = provider.log_prob_batch(&requests)?;
    Ok(layout
        .into_iter()
        .map(|(i, cands, start)| {
            let base = lps[start + cands.len()];
            let scored = cands
                .iter()
                .enumerate()
                .map(|(k, &(index, bm25))| CandidateScore { index, bm25, target: lps[start + k] - base })
                .collect();
            assemble(partition.doc_id.clone(), i, RecordKind::Semantic, scored, |c| c.target > 0.0)
        })
        .collect())
}

pub fn build_lexical_document_records(
    partition: &ChunkPartition,
    w: usize,
    params: Bm25Params,
    n_pos: usize,
) -> Vec<SupervisionRecord> {
    eligible_queries(partition.num_chunks(), w).map(|i| build_lexical_record(partition, i, w, params, n_pos)).collect()
}

/// Top-`k` gold chunks restricted to the positive set.
pub fn oracle_neighbors(record: &SupervisionRecord, k: usize) -> Vec<usize> {
    record.gold.iter().copied().filter(|j| record.is_positive(*j)).take(k).collect()
}

/// Mean over records of the best target score among the first `k` BM25 candidates.
pub fn max_target_at_k(records: &[SupervisionRecord], k: usize) -> f64 {
    let vals: Vec<f64> =
        records.iter().filter(|r| !r.candidates.is_empty()).map(|r| record_max_target_at_k(r, k)).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn record_max_target_at_k(record: &SupervisionRecord, k: usize) -> f64 {
    record.candidates.iter().take(k.max(1)).map(|c| c.target).fold(f64::NEG_INFINITY, f64::max)
}

pub fn write_records<W: Write>(mut w: W, kind: RecordKind, records: &[SupervisionRecord]) -> Result<()> {
    let header = Header { format: RECORDS_FORMAT.into(), version: FORMAT_VERSION, kind: Some(kind) };
    let io = |e| RptError::Format(format!("write: {e}"));
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<(RecordKind, Vec<SupervisionRecord>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| RptError::Format("missing header".into()))?;
    let header = check_header(&first.map_err(|e| RptError::Format(e.to_string()))?, RECORDS_FORMAT)?;
    let records = lines
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| RptError::Format(e.to_string()))?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((header.kind.unwrap_or(RecordKind::Semantic), records))
}

pub fn load_records(path: &Path) -> Result<(RecordKind, Vec<SupervisionRecord>)> {
    let f = std::fs::File::open(path).map_err(|e| RptError::io(path, e))?;
    read_records(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::partition;
    use proptest::prelude::*;

    fn part_from(chunks: &[&[u32]]) -> ChunkPartition {
        let tokens: Vec<u32> = chunks.iter().flat_map(|c| c.iter().copied()).collect();
        partition(&Document::new("doc", tokens, 256).unwrap(), chunks[0].len())
    }

    fn toy_partition() -> ChunkPartition {
        // chunk 1 holds the "fact" 2 9 9 9; the target chunk 7 continues it after a 2
        part_from(&[
            &[1, 2, 3, 4],
            &[2, 9, 9, 9],
            &[1, 2, 1, 2],
            &[3, 4, 3, 4],
            &[1, 3, 1, 3],
            &[2, 4, 2, 4],
            &[7, 7, 1, 2],
            &[9, 9, 9, 9],
        ])
    }

    fn toy_lm() -> CacheLmScorer {
        let p = toy_partition();
        CacheLmScorer::train(&[Document::new("d", p.tokens.clone(), 256).unwrap()], 256, 0.3)
    }

    /// Deterministic provider with context-dependent outputs, for checking
    /// assembly independently of any real LM.
    struct HashScorer;
    impl ScoringProvider for HashScorer {
        fn log_prob(&self, context: &[u32], continuation: &[u32]) -> Result<f64> {
            let h = context.iter().chain(continuation).fold(17u64, |a, &t| a.wrapping_mul(31).wrapping_add(t as u64));
            Ok(-((h % 1000) as f64) / 100.0 - 0.01)
        }
    }

    #[test]
    fn local_context_candidate_scores_zero() {
        let p = toy_partition();
        for provider in [&toy_lm() as &dyn ScoringProvider, &HashScorer, &UniformScorer { vocab_size: 256 }] {
            assert_eq!(target_score(provider, &p, 6, 4).unwrap(), 0.0);
        }
    }

    #[test]
    fn repeated_fact_scores_positive() {
        let p = toy_partition();
        assert!(target_score(&toy_lm(), &p, 6, 1).unwrap() > 0.0);
    }

    #[test]
    fn uniform_provider_scores_zero_everywhere() {
        let p = toy_partition();
        let u = UniformScorer { vocab_size: 256 };
        for j in 0..=4 {
            assert_eq!(target_score(&u, &p, 6, j).unwrap(), 0.0);
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        let p = toy_partition();
        let u = UniformScorer { vocab_size: 256 };
        assert!(matches!(target_score(&u, &p, 1, 0), Err(RptError::Precondition(_))));
        assert!(matches!(target_score(&u, &p, 7, 0), Err(RptError::Precondition(_))));
        assert!(matches!(target_score(&u, &p, 6, 5), Err(RptError::Precondition(_))));
    }

    fn record_with(scores: &[(usize, f64)]) -> SupervisionRecord {
        let cands = scores.iter().map(|&(index, t)| CandidateScore { index, bm25: 1.0, target: t }).collect();
        assemble("d".into(), 10, RecordKind::Semantic, cands, |c| c.target > 0.0)
    }

    #[test]
    fn gold_ranking_and_positive_set() {
        let r = record_with(&[(1, 0.4), (2, -0.1), (3, 0.2)]);
        assert_eq!(r.gold, vec![1, 3, 2]);
        assert_eq!(r.positives, vec![1, 3]);
        assert_eq!(oracle_neighbors(&r, 2), vec![1, 3]);
        let none = record_with(&[(1, -0.4), (2, 0.0)]);
        assert!(none.positives.is_empty());
        assert!(oracle_neighbors(&none, 2).is_empty());
        let one = record_with(&[(1, 0.4), (2, -0.1)]);
        assert_eq!(oracle_neighbors(&one, 2), vec![1]);
    }

    #[test]
    fn ties_in_target_score_go_to_lower_index() {
        let r = record_with(&[(5, 0.3), (2, 0.3), (4, 0.3)]);
        assert_eq!(r.gold, vec![2, 4, 5]);
    }

    #[test]
    fn built_record_matches_independent_rescoring() {
        let p = toy_partition();
        let lm = toy_lm();
        let i = 6;
        let pool = candidate_pool(i, 2);
        let cands = top_candidates(&p, &pool, QueryForm::QueryAndTarget, Bm25Params::default(), N_CAND);
        let rec = build_record(&lm, &p, i, &cands.candidates).unwrap();
        assert_eq!(rec.candidates.len(), cands.candidates.len());
        for c in &rec.candidates {
            let again = target_score(&lm, &p, i, c.index).unwrap();
            assert_eq!(c.target, again);
            assert!(c.index + 2 <= i);
        }
        let docs = build_document_records(&lm, &p, 2, Bm25Params::default(), N_CAND).unwrap();
        assert_eq!(docs.iter().find(|r| r.query_index == i).unwrap(), &rec);
    }

    #[test]
    fn max_target_curve() {
        let r = record_with(&[(1, -0.2), (2, 0.3)]);
        assert_eq!(max_target_at_k(std::slice::from_ref(&r), 1), -0.2);
        assert_eq!(max_target_at_k(std::slice::from_ref(&r), 2), 0.3);
        assert_eq!(max_target_at_k(std::slice::from_ref(&r), 20), 0.3);
    }

    #[test]
    fn eligibility_counts() {
        assert_eq!(eligible_queries(4, 2).len(), 0);
        assert_eq!(eligible_queries(3, 2).len(), 0);
        assert_eq!(eligible_queries(10, 2).len(), 10 - 2 - 2);
        let p = toy_partition();
        let recs = build_document_records(&toy_lm(), &p, 2, Bm25Params::default(), N_CAND).unwrap();
        assert_eq!(recs.len(), 8 - 2 - 2);
    }

    #[test]
    fn lexical_records_mark_top_bm25_positive() {
        let p = toy_partition();
        let r = build_lexical_record(&p, 6, 2, Bm25Params::default(), 2);
        assert_eq!(r.candidates.len(), 5);
        assert_eq!(r.positives, r.gold[..2].to_vec());
    }

    #[test]
    fn records_round_trip_and_reject_bad_headers() {
        let p = toy_partition();
        let recs = build_document_records(&toy_lm(), &p, 2, Bm25Params::default(), N_CAND).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, RecordKind::Semantic, &recs).unwrap();
        let (kind, back) = read_records(buf.as_slice()).unwrap();
        assert_eq!(kind, RecordKind::Semantic);
        assert_eq!(back, recs);
        let bad = b"{\"format\":\"rpt-supervision\",\"version\":9}\n";
        assert!(matches!(read_records(&bad[..]), Err(RptError::Version { .. })));
    }

    #[test]
    fn protocol_round_trip() {
        let reqs = vec![
            ScoreRequest { context_ids: vec![1, 2], continuation_ids: vec![3] },
            ScoreRequest { context_ids: vec![], continuation_ids: vec![4, 5] },
        ];
        let mut buf = Vec::new();
        write_requests(&mut buf, &reqs).unwrap();
        assert_eq!(read_requests(buf.as_slice()).unwrap(), reqs);
        let mut out = Vec::new();
        write_responses(&mut out, &[-1.5, -0.25]).unwrap();
        assert_eq!(read_responses(out.as_slice()).unwrap(), vec![-1.5, -0.25]);
    }

    #[test]
    fn command_scorer_speaks_the_protocol() {
        // a tiny external scorer: log P = -0.5 * len(continuation) - 0.01 * len(context)
        let script = r#"
import json, sys
lines = sys.stdin.read().splitlines()
assert json.loads(lines[0])["format"] == "rpt-score-requests"
print(json.dumps({"format": "rpt-score-responses", "version": 1}))
for l in lines[1:]:
    r = json.loads(l)
    print(json.dumps({"logprob": -0.5 * len(r["continuation_ids"]) - 0.01 * len(r["context_ids"])}))
"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.py");
        std::fs::write(&path, script).unwrap();
        if Command::new("python3").arg("--version").output().is_err() {
            return;
        }
        let scorer = CommandScorer { program: "python3".into(), args: vec![path.display().to_string()] };
        let lp = scorer.log_prob(&[1, 2, 3, 4], &[5, 6]).unwrap();
        assert!((lp - (-1.04)).abs() < 1e-12);
        let failing = CommandScorer { program: "false".into(), args: vec![] };
        assert!(matches!(failing.log_prob(&[1], &[2]), Err(RptError::Provider(_))));
    }

    proptest! {
        #[test]
        fn max_target_is_monotone_in_k(scores in proptest::collection::vec(-3.0f64..3.0, 1..20)) {
            let pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let r = record_with(&pairs);
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=scores.len() + 2 {
                let v = record_max_target_at_k(&r, k);
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn model_scorer_follows_the_chain_rule() {
        use crate::model::{Mode, Model, ModelConfig};
        let cfg = ModelConfig { d: 16, n_heads: 2, head_dim: 8, vocab_size: 16, ..ModelConfig::desk(Mode::Txl) };
        let model = Model::new(cfg, 3).unwrap();
        let scorer = ModelScorer { model: &model };
        let (ctx, a, b) = ([1u32, 2, 3], [4u32, 5], [6u32, 7, 8]);
        let ab: Vec<u32> = a.iter().chain(&b).copied().collect();
        let ctx_a: Vec<u32> = ctx.iter().chain(&a).copied().collect();
        let whole = scorer.log_prob(&ctx, &ab).unwrap();
        let split = scorer.log_prob(&ctx, &a).unwrap() + scorer.log_prob(&ctx_a, &b).unwrap();
        assert!((whole - split).abs() < 1e-9);
        assert!(whole < 0.0);
        let from_empty = scorer.log_prob(&[], &ctx).unwrap();
        let chained = scorer.log_prob(&[], &ctx[..1]).unwrap() + scorer.log_prob(&ctx[..1], &ctx[1..]).unwrap();
        assert!((from_empty - chained).abs() < 1e-9);
        assert!((scorer.log_prob(&[], &ctx[..1]).unwrap() + 16f64.ln()).abs() < 1e-12);
    }
}

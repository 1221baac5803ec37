//! Okapi BM25 over token ids, restricted to a document's own earlier chunks.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkPartition, RetrievableSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Index over chunks `0..n_chunks` of one partition.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    tf: Vec<HashMap<u32, u32>>,
    lens: Vec<usize>,
    df: HashMap<u32, u32>,
    avg_len: f64,
}

impl Bm25Index {
    /// Index the first `up_to` chunks (clamped to the number of chunks).
    pub fn build(partition: &ChunkPartition, up_to: usize, params: Bm25Params) -> Self {
        let n = up_to.min(partition.num_chunks());
        Self::from_chunks((0..n).map(|i| partition.chunk_tokens(i)), params)
    }

    pub fn from_chunks<'a>(chunks: impl Iterator<Item = &'a [u32]>, params: Bm25Params) -> Self {
        let mut tf = Vec::new();
        let mut lens = Vec::new();
        let mut df: HashMap<u32, u32> = HashMap::new();
        for chunk in chunks {
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for &t in chunk {
                *counts.entry(t).or_default() += 1;
            }
            for &t in counts.keys() {
                *df.entry(t).or_default() += 1;
            }
            lens.push(chunk.len());
            tf.push(counts);
        }
        let avg_len = if lens.is_empty() { 0.0 } else { lens.iter().sum::<usize>() as f64 / lens.len() as f64 };
        Self { params, tf, lens, df, avg_len }
    }

    pub fn num_chunks(&self) -> usize {
        self.tf.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn tf(&self, chunk: usize, term: u32) -> u32 {
        self.tf[chunk].get(&term).copied().unwrap_or(0)
    }

    pub fn df(&self, term: u32) -> u32 {
        self.df.get(&term).copied().unwrap_or(0)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// `ln(1 + (n - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: u32) -> f64 {
        let n = self.num_chunks() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of `chunk` for the distinct terms of `query`.
    pub fn score(&self, query: &QueryTerms, chunk: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.avg_len > 0.0 { self.lens[chunk] as f64 / self.avg_len } else { 0.0 };
        let mut total = 0.0;
        for &t in &query.0 {
            let tf = self.tf(chunk, t) as f64;
            if tf == 0.0 {
                continue;
            }
            total += self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm));
        }
        total
    }

    /// The `n_cand` best chunks of `allowed` (restricted to indexed chunks),
    /// by descending score with ties going to the lower index.
    pub fn top_candidates(&self, query: &QueryTerms, allowed: Range<usize>, n_cand: usize) -> Vec<(usize, f64)> {
        let end = allowed.end.min(self.num_chunks());
        let mut scored: Vec<(usize, f64)> = (allowed.start.min(end)..end).map(|j| (j, self.score(query, j))).collect();
        rank_desc(&mut scored);
        scored.truncate(n_cand);
        scored
    }
}

/// Distinct query terms in ascending order, so score sums are order-stable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTerms(Vec<u32>);

impl QueryTerms {
    pub fn new<'a>(parts: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let set: BTreeSet<u32> = parts.into_iter().flatten().copied().collect();
        Self(set.into_iter().collect())
    }

    pub fn terms(&self) -> &[u32] {
        &self.0
    }
}

/// Sort `(index, score)` by score descending, then index ascending.
pub fn rank_desc(items: &mut [(usize, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub doc_id: String,
    pub query_index: usize,
    pub candidates: Vec<(usize, f64)>,
}

impl CandidateSet {
    pub fn indices(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.0).collect()
    }
}

/// Which chunks form the BM25 query for chunk `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryForm {
    /// `(c_q, c_t)`: the query chunk and its successor. Training-time only.
    QueryAndTarget,
    /// `c_q` alone, as available at inference.
    QueryOnly,
}

/// BM25 candidates for query chunk `i`, with the index built lazily over the
/// allowed chunks only.
pub fn top_candidates(
    partition: &ChunkPartition,
    allowed: &RetrievableSet,
    form: QueryForm,
    params: Bm25Params,
    n_cand: usize,
) -> CandidateSet {
    let i = allowed.query_index;
    let index = Bm25Index::build(partition, allowed.members.end, params);
    let query = match form {
        QueryForm::QueryAndTarget if i + 1 < partition.num_chunks() => {
            QueryTerms::new([partition.chunk_tokens(i), partition.chunk_tokens(i + 1)])
        }
        _ => QueryTerms::new([partition.chunk_tokens(i)]),
    };
    CandidateSet {
        doc_id: partition.doc_id.clone(),
        query_index: i,
        candidates: index.top_candidates(&query, allowed.members.clone(), n_cand),
    }
}

/// Number of distinct tokens shared by two chunks.
pub fn token_overlap(a: &[u32], b: &[u32]) -> usize {
    let sa: BTreeSet<u32> = a.iter().copied().collect();
    let sb: BTreeSet<u32> = b.iter().copied().collect();
    sa.intersection(&sb).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{partition, retrievable_set, Document};
    use proptest::prelude::*;

    fn part(chunks: &[&[u32]]) -> ChunkPartition {
        let m = chunks[0].len();
        let tokens: Vec<u32> = chunks.iter().flat_map(|c| c.iter().copied()).collect();
        partition(&Document::new("t", tokens, 1 << 20).unwrap(), m)
    }

    /// Textbook BM25 recomputed from raw chunk contents.
    fn oracle_score(chunks: &[Vec<u32>], query: &[u32], j: usize, k1: f64, b: f64) -> f64 {
        let n = chunks.len() as f64;
        let avg = chunks.iter().map(|c| c.len()).sum::<usize>() as f64 / n;
        let mut uniq: Vec<u32> = query.to_vec();
        uniq.sort();
        uniq.dedup();
        uniq.iter()
            .map(|&t| {
                let df = chunks.iter().filter(|c| c.contains(&t)).count() as f64;
                let tf = chunks[j].iter().filter(|&&x| x == t).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * chunks[j].len() as f64 / avg))
            })
            .sum()
    }

    #[test]
    fn counts_on_single_chunk() {
        let p = part(&[&[1, 1, 2]]);
        let idx = Bm25Index::build(&p, 1, Bm25Params::default());
        assert_eq!((idx.tf(0, 1), idx.tf(0, 2), idx.df(1), idx.df(2)), (2, 1, 1, 1));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let p = part(&[&[1, 2], &[3, 4]]);
        let idx = Bm25Index::build(&p, 0, Bm25Params::default());
        assert!(idx.top_candidates(&QueryTerms::new([&[1u32][..]]), 0..2, 5).is_empty());
    }

    #[test]
    fn disjoint_chunks_have_unit_df() {
        let p = part(&[&[1, 2], &[3, 4]]);
        let idx = Bm25Index::build(&p, 2, Bm25Params::default());
        for t in 1..=4 {
            assert_eq!(idx.df(t), 1);
        }
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let p = part(&[&[1, 2], &[3, 4]]);
        let idx = Bm25Index::build(&p, 2, Bm25Params::default());
        assert_eq!(idx.score(&QueryTerms::new([&[9u32][..]]), 0), 0.0);
    }

    #[test]
    fn toy_index_matches_textbook_formula() {
        let chunks = vec![vec![5, 1, 1], vec![2, 5, 5], vec![3, 3, 3]];
        let refs: Vec<&[u32]> = chunks.iter().map(|c| c.as_slice()).collect();
        let p = part(&refs);
        let idx = Bm25Index::build(&p, 3, Bm25Params::default());
        let q = QueryTerms::new([&[5u32][..]]);
        for j in 0..3 {
            let expect = oracle_score(&chunks, &[5], j, 1.2, 0.75);
            assert!((idx.score(&q, j) - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
        // frozen: df(5)=2, n=3 -> idf = ln(1 + 1.5/2.5) = ln 1.6; chunk 1 has tf 2, all lengths equal
        let expect1 = 1.6f64.ln() * 2.0 * 2.2 / (2.0 + 1.2);
        assert!((idx.score(&q, 1) - expect1).abs() < 1e-12);
    }

    #[test]
    fn b_zero_ignores_length() {
        let params = Bm25Params { k1: 1.2, b: 0.0 };
        let idx = Bm25Index::from_chunks([&[7u32, 1][..], &[7, 2, 3, 4, 5, 6][..]].into_iter(), params);
        let q = QueryTerms::new([&[7u32][..]]);
        assert_eq!(idx.score(&q, 0), idx.score(&q, 1));
    }

    #[test]
    fn candidates_respect_allowed_set_and_count() {
        let chunks: Vec<Vec<u32>> = (0..9).map(|i| vec![i, i + 1, 100]).collect();
        let refs: Vec<&[u32]> = chunks.iter().map(|c| c.as_slice()).collect();
        let p = part(&refs);
        let none = top_candidates(&p, &retrievable_set(1, 2), QueryForm::QueryOnly, Bm25Params::default(), 20);
        assert!(none.candidates.is_empty());
        let six = top_candidates(&p, &retrievable_set(7, 2), QueryForm::QueryAndTarget, Bm25Params::default(), 20);
        assert_eq!(six.candidates.len(), 6);
        assert!(six.candidates.iter().all(|(j, _)| *j <= 5));
    }

    #[test]
    fn rare_shared_term_ranks_first() {
        // only chunk 2 shares the rare token 77 with the query chunk
        let p = part(&[&[1, 2, 3, 4], &[1, 2, 5, 6], &[77, 2, 3, 9], &[1, 4, 5, 6], &[1, 2, 3, 4], &[77, 1, 8, 8]]);
        let c = top_candidates(&p, &retrievable_set(5, 2), QueryForm::QueryOnly, Bm25Params::default(), 4);
        assert_eq!(c.candidates[0].0, 2);
    }

    #[test]
    fn overlap_counts_unique_tokens() {
        assert_eq!(token_overlap(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]), 5);
        assert_eq!(token_overlap(&[1, 2], &[3, 4]), 0);
        assert_eq!(token_overlap(&[1, 1, 2], &[2, 3]), 1);
    }

    proptest! {
        #[test]
        fn top_candidates_equal_exhaustive_ranking(
            chunks in proptest::collection::vec(proptest::collection::vec(0u32..12, 4), 1..40),
            q in proptest::collection::vec(0u32..12, 1..8),
            n in 1usize..25,
        ) {
            let refs: Vec<&[u32]> = chunks.iter().map(|c| c.as_slice()).collect();
            let p = part(&refs);
            let idx = Bm25Index::build(&p, chunks.len(), Bm25Params::default());
            let got = idx.top_candidates(&QueryTerms::new([q.as_slice()]), 0..chunks.len(), n);
            let mut all: Vec<(usize, f64)> = (0..chunks.len()).map(|j| (j, oracle_score(&chunks, &q, j, 1.2, 0.75))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(n);
            prop_assert_eq!(got.len(), all.len());
            for (g, e) in got.iter().zip(&all) {
                prop_assert!((g.1 - e.1).abs() <= 1e-9 * e.1.abs().max(1.0));
            }
        }

        #[test]
        fn score_non_decreasing_in_tf(extra in 0usize..6) {
            // fixed chunk length 8: replace filler tokens by the query term
            let mk = |k: usize| -> Vec<u32> { (0..8).map(|i| if i < k { 1 } else { 50 + i as u32 }).collect() };
            let idx_a = Bm25Index::from_chunks([mk(1 + extra).as_slice(), &[9u32; 8][..]].into_iter(), Bm25Params::default());
            let idx_b = Bm25Index::from_chunks([mk(2 + extra).as_slice(), &[9u32; 8][..]].into_iter(), Bm25Params::default());
            let q = QueryTerms::new([&[1u32][..]]);
            prop_assert!(idx_b.score(&q, 0) >= idx_a.score(&q, 0));
        }
    }
}

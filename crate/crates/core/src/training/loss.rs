//! Language-modeling and LambdaRank retrieval losses.

use crate::autodiff::HingePair;
use crate::supervision::SupervisionRecord;
use crate::tensor::Mat;

/// Mean next-token cross-entropy over rows with a target.
pub fn lm_loss(logits: &Mat, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        total += max + z.ln() - row[t];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// One weighted ranking pair: candidate `hi` should outscore candidate `lo`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair {
    pub hi: usize,
    pub lo: usize,
    pub lambda: f64,
}

/// Qualifying pairs of a record with their LambdaRank weights.
///
/// A pair `(l, j)` qualifies when `l` is positive and its target score is
/// strictly higher than `j`'s. The weight is the absolute NDCG change from
/// swapping the two in the ranking induced by `query_scores` (one score per
/// candidate, in record order), with binary relevance.
pub fn lambda_pairs(record: &SupervisionRecord, query_scores: &[f64]) -> Vec<RankPair> {
    let cands = &record.candidates;
    assert_eq!(cands.len(), query_scores.len(), "one query score per candidate");
    if record.positives.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<(usize, f64)> = query_scores.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(cands[a.0].index.cmp(&cands[b.0].index)));
    let mut rank = vec![0; cands.len()];
    for (r, &(pos, _)) in order.iter().enumerate() {
        rank[pos] = r;
    }
    let rel: Vec<f64> = cands.iter().map(|c| if record.is_positive(c.index) { 1.0 } else { 0.0 }).collect();
    let n_pos = rel.iter().filter(|&&r| r > 0.0).count();
    let idcg: f64 = (0..n_pos).map(discount).sum();
    let mut pairs = Vec::new();
    for (l, cl) in cands.iter().enumerate() {
        if rel[l] == 0.0 {
            continue;
        }
        for (j, cj) in cands.iter().enumerate() {
            if j == l || cl.target <= cj.target {
                continue;
            }
            let delta = ((rel[l] - rel[j]) * (discount(rank[l]) - discount(rank[j]))).abs() / idcg;
            pairs.push(RankPair { hi: l, lo: j, lambda: delta });
        }
    }
    pairs
}

/// `Σ λ · max(0, τ − (s_q(l) − s_q(j)))` over qualifying pairs.
pub fn lambdarank_loss(record: &SupervisionRecord, query_scores: &[f64], tau: f64) -> f64 {
    lambda_pairs(record, query_scores)
        .iter()
        .map(|p| p.lambda * (tau - (query_scores[p.hi] - query_scores[p.lo])).max(0.0))
        .sum()
}

/// Hinge terms for the retrieval loss of one document, addressed into the
/// flattened `n_chunks x n_chunks` score matrix and averaged over records.
pub fn retrieval_hinges(records: &[&SupervisionRecord], scores: &Mat) -> Vec<HingePair> {
    let n = scores.cols;
    let count = records.iter().filter(|r| r.query_index < scores.rows).count();
    let mut out = Vec::new();
    for r in records {
        let i = r.query_index;
        if i >= scores.rows {
            continue;
        }
        let q: Vec<f64> = r.candidates.iter().map(|c| scores.get(i, c.index)).collect();
        for p in lambda_pairs(r, &q) {
            if p.lambda > 0.0 {
                out.push(HingePair {
                    hi: i * n + r.candidates[p.hi].index,
                    lo: i * n + r.candidates[p.lo].index,
                    weight: p.lambda / count as f64,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::{CandidateScore, RecordKind};
    use proptest::prelude::*;

    fn record(targets: &[f64]) -> SupervisionRecord {
        let candidates: Vec<CandidateScore> =
            targets.iter().enumerate().map(|(index, &target)| CandidateScore { index, bm25: 0.0, target }).collect();
        let mut gold: Vec<(usize, f64)> = targets.iter().copied().enumerate().collect();
        crate::lexical::rank_desc(&mut gold);
        SupervisionRecord {
            doc_id: "d".into(),
            query_index: targets.len() + 2,
            kind: RecordKind::Semantic,
            positives: gold.iter().filter(|g| g.1 > 0.0).map(|g| g.0).collect(),
            gold: gold.iter().map(|g| g.0).collect(),
            candidates,
        }
    }

    /// Direct enumeration: permute the ranking for every pair and recompute NDCG.
    fn brute_force(targets: &[f64], q: &[f64], tau: f64) -> f64 {
        let n = targets.len();
        let rel: Vec<f64> = targets.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
        let ndcg = |ord: &[usize]| -> f64 {
            let dcg: f64 = ord.iter().enumerate().map(|(r, &c)| rel[c] / (r as f64 + 2.0).log2()).sum();
            let mut ideal = rel.clone();
            ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let idcg: f64 = ideal.iter().enumerate().map(|(r, g)| g / (r as f64 + 2.0).log2()).sum();
            dcg / idcg
        };
        let base = ndcg(&order);
        let mut total = 0.0;
        for l in 0..n {
            for j in 0..n {
                if rel[l] == 0.0 || !(targets[l] > targets[j]) {
                    continue;
                }
                let mut swapped = order.clone();
                let pl = swapped.iter().position(|&c| c == l).unwrap();
                let pj = swapped.iter().position(|&c| c == j).unwrap();
                swapped.swap(pl, pj);
                let lambda = (ndcg(&swapped) - base).abs();
                total += lambda * (tau - (q[l] - q[j])).max(0.0);
            }
        }
        total
    }

    #[test]
    fn hand_computed_example() {
        let r = record(&[0.4, 0.2, -0.1]);
        let loss = lambdarank_loss(&r, &[0.0, 0.0, 1.0], 0.5);
        let idcg = 1.0 + 1.0 / 3f64.log2();
        let expected = 1.5 * (1.0 - 1.0 / 3f64.log2()) / idcg + 1.5 * (1.0 - 0.5) / idcg;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.7993).abs() < 1e-4);
        assert!((loss - brute_force(&[0.4, 0.2, -0.1], &[0.0, 0.0, 1.0], 0.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_positive_set_gives_zero() {
        let r = record(&[-0.4, -0.2, 0.0]);
        assert_eq!(lambdarank_loss(&r, &[0.3, 0.1, 2.0], 4.0), 0.0);
    }

    #[test]
    fn separated_ranking_gives_zero() {
        let r = record(&[0.4, 0.2, -0.1]);
        assert_eq!(lambdarank_loss(&r, &[2.0, 1.0, 0.0], 0.5), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Mat::zeros(3, 256);
        let l = lm_loss(&logits, &[Some(1), Some(7), None]);
        assert!((l - 256f64.ln()).abs() < 1e-12);
        let mut sharp = Mat::zeros(1, 4);
        sharp.set(0, 2, 60.0);
        assert!(lm_loss(&sharp, &[Some(2)]) < 1e-20);
    }

    #[test]
    fn hinges_address_the_score_matrix() {
        let mut r = record(&[0.4, 0.2, -0.1]);
        r.query_index = 4;
        let mut scores = Mat::zeros(5, 5);
        scores.set(4, 2, 1.0);
        let hinges = retrieval_hinges(&[&r], &scores);
        let total: f64 =
            hinges.iter().map(|h| h.weight * (0.5 - (scores.data[h.hi] - scores.data[h.lo])).max(0.0)).sum();
        assert!((total - lambdarank_loss(&r, &[0.0, 0.0, 1.0], 0.5)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            targets in proptest::collection::vec(-2.0f64..2.0, 1..12),
            seed in proptest::collection::vec(-3i32..3, 12),
            tau in 0.0f64..5.0,
        ) {
            let q: Vec<f64> = seed.iter().take(targets.len()).map(|&x| x as f64 * 0.5).collect();
            let r = record(&targets);
            let fast = lambdarank_loss(&r, &q, tau);
            let slow = brute_force(&targets, &q, tau);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1.0));
            prop_assert!(fast >= 0.0);
        }
    }
}

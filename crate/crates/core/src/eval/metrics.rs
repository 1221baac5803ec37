//! Ranking metrics against gold labels.

/// `(precision@k, recall@k)` of `predicted` against `positives`; recall is 1
/// when there are no positives.
pub fn precision_recall_at_k(predicted: &[usize], positives: &[usize], k: usize) -> (f64, f64) {
    assert!(k >= 1, "k must be at least 1");
    let hits = predicted.iter().take(k).filter(|j| positives.contains(j)).count() as f64;
    let precision = hits / k as f64;
    let recall = if positives.is_empty() { 1.0 } else { hits / positives.len() as f64 };
    (precision, recall)
}

/// NDCG@k with `gain(j)` per item; 0 when the ideal DCG is 0.
pub fn ndcg_at_k(predicted: &[usize], gain: impl Fn(usize) -> f64, all: &[usize], k: usize) -> f64 {
    let dcg: f64 = predicted.iter().take(k).enumerate().map(|(r, &j)| gain(j) / ((r + 2) as f64).log2()).sum();
    let mut ideal: Vec<f64> = all.iter().map(|&j| gain(j)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(r, g)| g / ((r + 2) as f64).log2()).sum();
    if idcg <= 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Indices of `items` ordered by score descending, ties to the lower index.
pub fn rank_by(items: &[usize], score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = items.iter().map(|&j| (j, score(j))).collect();
    crate::lexical::rank_desc(&mut v);
    v.into_iter().map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn counting_examples() {
        assert_eq!(precision_recall_at_k(&[1, 9, 2, 3], &[1, 2, 3, 4], 2), (0.5, 0.25));
        assert_eq!(precision_recall_at_k(&[3, 1, 2], &[1, 2], 10).1, 1.0);
        assert_eq!(precision_recall_at_k(&[3], &[], 2), (0.0, 1.0));
    }

    #[test]
    fn ndcg_examples() {
        let gains = |j: usize| [3.0, 2.0, 0.0, 1.0][j];
        let all = [0, 1, 2, 3];
        assert_eq!(ndcg_at_k(&[0, 1, 3, 2], gains, &all, 4), 1.0);
        assert_eq!(ndcg_at_k(&[0, 1], |_| 0.0, &all, 2), 0.0);
        // hand table for predicted (2, 3, 0, 1):
        // dcg  = 0/1 + 1/log2 3 + 3/2 + 2/log2 5
        // idcg = 3/1 + 2/log2 3 + 1/2 + 0
        let dcg = 1.0 / 3f64.log2() + 1.5 + 2.0 / 5f64.log2();
        let idcg = 3.0 + 2.0 / 3f64.log2() + 0.5;
        assert!((ndcg_at_k(&[2, 3, 0, 1], gains, &all, 4) - dcg / idcg).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn set_metrics_match_recount(
            n in 1usize..30, k in 1usize..25,
            pos_mask in proptest::collection::vec(any::<bool>(), 30),
            perm_seed in proptest::collection::vec(any::<u32>(), 30),
        ) {
            let mut items: Vec<usize> = (0..n).collect();
            items.sort_by_key(|&i| perm_seed[i]);
            let positives: Vec<usize> = (0..n).filter(|&i| pos_mask[i]).collect();
            let (p, r) = precision_recall_at_k(&items, &positives, k);
            let top: BTreeSet<usize> = items.iter().take(k).copied().collect();
            let pos: BTreeSet<usize> = positives.iter().copied().collect();
            let hits = top.intersection(&pos).count();
            prop_assert_eq!(p, hits as f64 / k as f64);
            if pos.is_empty() {
                prop_assert_eq!(r, 1.0);
            } else {
                prop_assert_eq!(r, hits as f64 / pos.len() as f64);
            }
        }

        #[test]
        fn ndcg_depends_only_on_ranking(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..15),
            gains in proptest::collection::vec(0.0f64..3.0, 15),
        ) {
            let items: Vec<usize> = (0..scores.len()).collect();
            let a = rank_by(&items, |j| scores[j]);
            let b = rank_by(&items, |j| (scores[j] * 0.5).exp());
            let g = |j: usize| gains[j];
            let na = ndcg_at_k(&a, g, &items, 10);
            prop_assert_eq!(na, ndcg_at_k(&b, g, &items, 10));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&na));
        }
    }
}

use super::*;
use crate::corpus::{partition, Document};
use crate::model::ModelConfig;
use crate::supervision::{build_document_records, CacheLmScorer};

fn tiny(mode: Mode) -> Model {
    let cfg = ModelConfig {
        d: 16,
        n_heads: 2,
        head_dim: 8,
        m: 4,
        window: 16,
        stride: 8,
        vocab_size: 16,
        dropout: 0.0,
        ..ModelConfig::desk(mode)
    };
    Model::new(cfg, 5).unwrap()
}

fn docs() -> Vec<EvalDoc> {
    let raw: Vec<Document> = (0..2u32)
        .map(|d| {
            let toks: Vec<u32> = (0..48u32).map(|t| (t * 7 + d * 3 + (t / 12)) % 16).collect();
            Document::new(format!("d{d}"), toks, 16).unwrap()
        })
        .collect();
    let lm = CacheLmScorer::train(&raw, 16, 0.3);
    raw.iter()
        .map(|d| {
            let p = partition(d, 4);
            let records = build_document_records(&lm, &p, 2, Default::default(), 20).unwrap();
            EvalDoc { partition: p, records }
        })
        .collect()
}

fn chunk(doc: &str, i: usize, nll: f64, gold: Option<bool>) -> ChunkResult {
    ChunkResult { doc_id: doc.into(), chunk: i, nll, tokens: 4, neighbors: vec![], gold_retrieved: gold }
}

#[test]
fn cached_matches_full_recompute_for_each_mode() {
    let docs = docs();
    for mode in [Mode::Txl, Mode::Retro, Mode::Rpt] {
        let model = tiny(mode);
        let src = neighbor_source(&model, &docs[0], EvalNeighbors::Own);
        let cached = document_nll(&model, &docs[0].partition.tokens, &src).unwrap().nll;
        let full = full_recompute_nll(&model, &docs[0].partition.tokens, &src).unwrap();
        assert_eq!(cached.len(), full.len());
        for (a, b) in cached.iter().zip(&full) {
            assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
        }
    }
}

#[test]
fn chunk_results_reassemble_the_mean() {
    let docs = docs();
    let model = tiny(Mode::Rpt);
    let (report, chunks) = evaluate(&model, &docs, EvalNeighbors::Own, &DEFAULT_KS).unwrap();
    assert_eq!(chunks.len(), 24);
    assert_eq!(chunks[0].tokens, 3);
    let total: f64 = chunks.iter().map(|c| c.nll * c.tokens as f64).sum();
    let n: usize = chunks.iter().map(|c| c.tokens).sum();
    assert_eq!(n, report.tokens);
    assert!((total / n as f64 - report.mean_nll).abs() < 1e-12);
    assert!((report.perplexity - report.mean_nll.exp()).abs() < 1e-12);
    let p = perplexity(&model, &docs[0].partition).unwrap();
    assert!(p.is_finite() && p > 1.0);
}

#[test]
fn retrieval_metrics_match_a_recount() {
    let docs = docs();
    let model = tiny(Mode::Rpt);
    let (report, _) = evaluate(&model, &docs, EvalNeighbors::Own, &[2]).unwrap();
    let summary = report.retrieval.iter().find(|s| s.retriever == "model" && s.pool == "candidates").unwrap();

    let mut sum = 0.0;
    let mut n = 0;
    for doc in &docs {
        let out = document_nll(&model, &doc.partition.tokens, &NeighborSource::Retrieve).unwrap();
        for r in &doc.records {
            let row = &out.scores[r.query_index];
            let mut c: Vec<usize> = r.candidates.iter().map(|c| c.index).collect();
            // stable sort keeps the lower index first on ties
            c.sort_by(|a, b| row[*b].total_cmp(&row[*a]));
            sum += c.iter().take(2).filter(|j| r.positives.contains(j)).count() as f64 / 2.0;
            n += 1;
        }
    }
    assert_eq!(summary.records, n);
    assert!((summary.precision[0] - sum / n as f64).abs() < 1e-12);
    for s in &report.retrieval {
        for v in s.precision.iter().chain(&s.recall).chain(&s.ndcg).chain(&s.ndcg_binary) {
            assert!((0.0..=1.0 + 1e-12).contains(v), "{s:?}");
        }
    }
}

#[test]
fn txl_reports_only_bm25_retrieval() {
    let (report, chunks) = evaluate(&tiny(Mode::Txl), &docs(), EvalNeighbors::Own, &DEFAULT_KS).unwrap();
    assert!(report.retrieval.iter().all(|s| s.retriever == "bm25"));
    assert!(chunks.iter().all(|c| c.neighbors.is_empty()));
}

#[test]
fn oracle_neighbors_come_from_records() {
    let docs = docs();
    let model = tiny(Mode::Retro);
    let NeighborSource::Given(lists) = neighbor_source(&model, &docs[0], EvalNeighbors::Oracle) else {
        panic!("expected given neighbors")
    };
    for (i, l) in lists.iter().enumerate() {
        match docs[0].record(i) {
            Some(r) => assert_eq!(l, &oracle_neighbors(r, model.config.k)),
            None => assert!(l.is_empty()),
        }
    }
    let report = oracle_eval(&model, &docs).unwrap();
    assert_eq!(report.neighbors, EvalNeighbors::Oracle);
    let (_, chunks) = evaluate(&model, &docs, EvalNeighbors::Oracle, &DEFAULT_KS).unwrap();
    // with oracle neighbors every labelled chunk saw a positive whenever one exists
    for c in chunks.iter().filter(|c| c.gold_retrieved.is_some()) {
        let doc = docs.iter().find(|d| d.partition.doc_id == c.doc_id).unwrap();
        let r = doc.record(c.chunk - 1).unwrap();
        assert_eq!(c.gold_retrieved, Some(!r.positives.is_empty()));
    }
}

#[test]
fn txl_oracle_is_plain_perplexity() {
    let docs = docs();
    let model = tiny(Mode::Txl);
    let plain = evaluate(&model, &docs, EvalNeighbors::Own, &DEFAULT_KS).unwrap().0.perplexity;
    assert_eq!(oracle_eval(&model, &docs).unwrap().perplexity, plain);
}

#[test]
fn oracle_without_positives_falls_back_to_no_neighbors() {
    let mut docs = docs();
    for d in &mut docs {
        for r in &mut d.records {
            r.positives.clear();
        }
    }
    let model = tiny(Mode::Retro);
    let oracle = evaluate(&model, &docs, EvalNeighbors::Oracle, &DEFAULT_KS).unwrap().0;
    let none = evaluate(&model, &docs, EvalNeighbors::None, &DEFAULT_KS).unwrap().0;
    assert_eq!(oracle.perplexity, none.perplexity);
}

#[test]
fn wrong_chunk_length_is_rejected() {
    let mut docs = docs();
    docs[0].partition = partition(&Document::new("x", vec![1; 30], 16).unwrap(), 3);
    assert!(matches!(
        evaluate(&tiny(Mode::Txl), &docs, EvalNeighbors::Own, &DEFAULT_KS),
        Err(RptError::PartitionMismatch(_))
    ));
}

#[test]
fn improvement_hand_example() {
    let a = vec![chunk("d", 0, 1.0, None), chunk("d", 1, 3.0, Some(true)), chunk("d", 2, 2.0, Some(false))];
    let b = vec![chunk("d", 0, 2.0, None), chunk("d", 1, 2.0, None), chunk("d", 2, 2.0, None)];
    let r = improvement_report(&a, &b).unwrap();
    assert_eq!(r.values, vec![0.5, -0.5, 0.0]);
    assert_eq!(r.mean, 0.0);
    assert_eq!(r.median, 0.0);
    assert_eq!(r.skew, 0.0);
    assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 3);
    assert_eq!(r.histogram[15].count, 1);
    assert_eq!(r.histogram[10].count, 1);
    assert_eq!(r.histogram[5].count, 1);

    let s = subgroup_report(&a, &b).unwrap();
    assert_eq!(s.labelled, 2);
    assert_eq!(s.with_gold, Some(SubgroupStats { count: 1, mean_improvement: -0.5 }));
    assert_eq!(s.without_gold, Some(SubgroupStats { count: 1, mean_improvement: 0.0 }));

    let shifted = vec![chunk("d", 1, 1.0, None), chunk("d", 2, 1.0, None), chunk("d", 3, 1.0, None)];
    assert!(matches!(improvement_report(&a, &shifted), Err(RptError::PartitionMismatch(_))));
}

#[test]
fn skew_sign_follows_the_long_tail() {
    let b: Vec<ChunkResult> = (0..5).map(|i| chunk("d", i, 1.0, None)).collect();
    let a: Vec<ChunkResult> =
        [0.99, 0.99, 0.99, 0.99, 0.2].iter().enumerate().map(|(i, &v)| chunk("d", i, v, None)).collect();
    assert!(improvement_report(&a, &b).unwrap().skew > 0.0);
}

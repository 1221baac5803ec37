use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{partition, Document};
use crate::model::{Mode, ModelConfig};
use crate::supervision::{build_document_records, CacheLmScorer};

fn tiny_model(mode: Mode) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_heads: 2,
        head_dim: 8,
        m: 4,
        window: 16,
        stride: 8,
        vocab_size: 16,
        ..ModelConfig::desk(mode)
    }
}

fn corpus() -> Vec<Document> {
    // a repeating pattern with a per-document twist, so recall helps
    (0..3u32)
        .map(|d| {
            let toks: Vec<u32> = (0..64u32).map(|t| (t * 3 + d + (t / 16) * 5) % 16).collect();
            Document::new(format!("doc{d}"), toks, 16).unwrap()
        })
        .collect()
}

fn train_docs(mode: Mode) -> Vec<TrainDoc> {
    let docs = corpus();
    let lm = CacheLmScorer::train(&docs, 16, 0.3);
    docs.iter()
        .map(|d| {
            let p = partition(d, 4);
            let recs = if mode == Mode::Rpt {
                build_document_records(&lm, &p, 2, Default::default(), 20).unwrap()
            } else {
                Vec::new()
            };
            TrainDoc::new(p, recs).unwrap()
        })
        .collect()
}

fn config(mode: Mode, steps: u64) -> TrainConfig {
    TrainConfig {
        model: tiny_model(mode),
        schedules: Schedules::desk(steps),
        optimizer: AdaBelief { eps: 1e-12, ..AdaBelief::default() },
        seed: 11,
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let docs = train_docs(Mode::Rpt);
    let run = || {
        let mut st = TrainState::new(config(Mode::Rpt, 20)).unwrap();
        (0..4).map(|_| st.train_step(&docs).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn txl_reports_no_retrieval_loss() {
    let docs = train_docs(Mode::Txl);
    let mut st = TrainState::new(config(Mode::Txl, 10)).unwrap();
    for _ in 0..3 {
        let b = st.train_step(&docs).unwrap();
        assert_eq!(b.ret_loss, 0.0);
        assert_eq!(b.alpha_ret, 0.0);
        assert_eq!(b.total, b.lm_loss);
    }
}

#[test]
fn lm_loss_decreases_on_toy_corpus() {
    let docs = train_docs(Mode::Rpt);
    let mut cfg = config(Mode::Rpt, 50);
    cfg.schedules.lr_max = 3e-3;
    cfg.model.dropout = 0.0;
    let mut st = TrainState::new(cfg).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| st.train_step(&docs).unwrap().lm_loss).collect();
    // smooth over one pass through the corpus
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let down = smooth.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down as f64 >= 0.8 * (smooth.len() - 1) as f64, "{losses:?}");
    assert!(losses[49] < losses[0]);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let docs = train_docs(Mode::Rpt);
    let mut full = TrainState::new(config(Mode::Rpt, 30)).unwrap();
    for _ in 0..5 {
        full.train_step(&docs).unwrap();
    }
    let bytes = checkpoint::to_bytes(&full).unwrap();
    let restored = checkpoint::from_bytes(&bytes, Some(&full.config)).unwrap();
    assert_eq!(checkpoint::to_bytes(&restored).unwrap(), bytes);
    let mut resumed = restored;
    for _ in 0..10 {
        assert_eq!(full.train_step(&docs).unwrap(), resumed.train_step(&docs).unwrap());
    }

    let mut other = config(Mode::Rpt, 30);
    other.model.d = 32;
    other.model.head_dim = 16;
    assert!(matches!(checkpoint::from_bytes(&bytes, Some(&other)), Err(crate::RptError::ConfigMismatch(_))));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(checkpoint::from_bytes(&bad, None), Err(crate::RptError::Version { .. })));
}

#[test]
fn scheduled_sampling_frequencies() {
    let docs = train_docs(Mode::Rpt);
    let doc = &docs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let with_record: Vec<usize> = (0..doc.partition.num_chunks()).filter(|&i| doc.record(i).is_some()).collect();
    let all_gold = scheduled_sample(doc, 2, 1.0, &mut rng);
    for &i in &with_record {
        assert_eq!(all_gold[i], Some(crate::supervision::oracle_neighbors(doc.record(i).unwrap(), 2)));
    }
    assert!(scheduled_sample(doc, 2, 0.0, &mut rng).iter().all(Option::is_none));
    let i = with_record[0];
    let trials = 10_000;
    let gold = (0..trials).filter(|_| scheduled_sample(doc, 2, 0.5, &mut rng)[i].is_some()).count();
    let frac = gold as f64 / trials as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn data_order_is_a_permutation_per_epoch() {
    for epoch in 0..3u64 {
        let mut seen: Vec<usize> = (0..7).map(|s| doc_for_step(5, epoch * 7 + s, 7)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
}

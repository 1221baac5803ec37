//! One training step: neighbor choice with scheduled sampling, LM plus
//! retrieval loss, backward pass and optimizer update.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::retrieval_hinges;
use super::optim::{AdaBelief, OptimizerState};
use super::schedule::Schedules;
use crate::autodiff::Var;
use crate::corpus::{retrievable_set, ChunkPartition};
use crate::error::{Result, RptError};
use crate::lexical::{top_candidates, Bm25Params, QueryForm};
use crate::model::{next_token_targets, Dropout, Mode, Model, ModelConfig, NeighborSource, Session};
use crate::supervision::{oracle_neighbors, SupervisionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedules: Schedules,
    pub optimizer: AdaBelief,
    pub seed: u64,
}

/// A document ready for training, with its supervision records sorted by query chunk.
#[derive(Debug, Clone)]
pub struct TrainDoc {
    pub partition: ChunkPartition,
    pub records: Vec<SupervisionRecord>,
}

impl TrainDoc {
    pub fn new(partition: ChunkPartition, records: Vec<SupervisionRecord>) -> Result<Self> {
        let mut records = records;
        if let Some(r) = records.iter().find(|r| r.doc_id != partition.doc_id) {
            return Err(RptError::PartitionMismatch(format!(
                "record for {} attached to {}",
                r.doc_id, partition.doc_id
            )));
        }
        records.sort_by_key(|r| r.query_index);
        Ok(Self { partition, records })
    }

    pub fn record(&self, i: usize) -> Option<&SupervisionRecord> {
        self.records.binary_search_by_key(&i, |r| r.query_index).ok().map(|k| &self.records[k])
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub lm_loss: f64,
    pub ret_loss: f64,
    pub total: f64,
    pub p_ss: f64,
    pub alpha_ret: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Stateless per-step random stream: `(seed, step, purpose)` fully determines it.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

const STREAM_ORDER: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Document visited at `step`: a fresh permutation of all documents per epoch.
pub fn doc_for_step(seed: u64, step: u64, n_docs: usize) -> usize {
    let epoch = step / n_docs as u64;
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut step_rng(seed, epoch, STREAM_ORDER));
    order[(step % n_docs as u64) as usize]
}

/// Gold neighbors with probability `p_ss`, decided independently per chunk.
/// Chunks without a record always use the model's own retrieval.
pub fn scheduled_sample(doc: &TrainDoc, k: usize, p_ss: f64, rng: &mut impl Rng) -> Vec<Option<Vec<usize>>> {
    (0..doc.partition.num_chunks())
        .map(|i| {
            let gold = rng.gen::<f64>() < p_ss;
            match doc.record(i) {
                Some(r) if gold => Some(oracle_neighbors(r, k)),
                _ => None,
            }
        })
        .collect()
}

/// BM25 neighbors per chunk over its retrievable set.
pub fn bm25_neighbors(partition: &ChunkPartition, w: usize, k: usize, form: QueryForm) -> Vec<Vec<usize>> {
    (0..partition.num_chunks())
        .map(|i| top_candidates(partition, &retrievable_set(i, w), form, Bm25Params::default(), k).indices())
        .collect()
}

/// Loss nodes of one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub lm_loss: f64,
    pub ret_loss: f64,
}

/// Builds `lm + alpha * ret` on the session's graph. The retrieval term is
/// present only for rpt models whose document has usable records.
pub fn training_loss(
    model: &Model,
    s: &mut Session,
    doc: &TrainDoc,
    source: &NeighborSource,
    alpha: f64,
    tau: f64,
) -> Result<LossVars> {
    let tokens = &doc.partition.tokens;
    let out = model.forward(s, tokens, source)?;
    let lm = s.graph.cross_entropy(out.logits, next_token_targets(tokens));
    let lm_loss = s.value(lm).item();
    if let (Mode::Rpt, Some(scores)) = (model.config.mode, out.scores) {
        let records: Vec<&SupervisionRecord> = doc.records.iter().collect();
        let hinges = retrieval_hinges(&records, s.value(scores));
        if !hinges.is_empty() {
            let r = s.graph.pair_hinge(scores, hinges, tau);
            let ret_loss = s.value(r).item();
            let total = s.graph.weighted_sum(vec![(lm, 1.0), (r, alpha)]);
            return Ok(LossVars { total, lm_loss, ret_loss });
        }
    }
    Ok(LossVars { total: lm, lm_loss, ret_loss: 0.0 })
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self { config, model, optimizer, step: 0 })
    }

    pub fn train_step(&mut self, docs: &[TrainDoc]) -> Result<LossBreakdown> {
        if docs.is_empty() {
            return Err(RptError::Precondition("no training documents".into()));
        }
        let step = self.step;
        let (seed, sched) = (self.config.seed, self.config.schedules);
        let mc = &self.model.config;
        let doc = &docs[doc_for_step(seed, step, docs.len())];
        let (p_ss, alpha, tau, lr) = (sched.p_ss(step), sched.alpha_ret(step), sched.tau(step), sched.lr(step));
        let source = match mc.mode {
            Mode::Txl => NeighborSource::None,
            Mode::Retro => NeighborSource::Given(bm25_neighbors(&doc.partition, mc.w, mc.k, QueryForm::QueryAndTarget)),
            Mode::Rpt => {
                let mut rng = step_rng(seed, step, STREAM_SAMPLING);
                NeighborSource::Mixed(scheduled_sample(doc, mc.k, p_ss, &mut rng))
            }
        };
        let dropout = Dropout { rate: mc.dropout, rng: step_rng(seed, step, STREAM_DROPOUT) };

        let mut s = Session::new(&self.model, Some(dropout));
        let loss = training_loss(&self.model, &mut s, doc, &source, alpha, tau)?;
        let (lm_loss, ret_loss, total) = (loss.lm_loss, loss.ret_loss, loss.total);
        let total_value = s.value(total).item();
        let grads = s.graph.backward(total, self.model.params.len());
        drop(s);
        let report = self.config.optimizer.step(&mut self.model.params, &mut self.optimizer, &grads, lr);
        self.step += 1;
        Ok(LossBreakdown {
            step,
            lm_loss,
            ret_loss,
            total: total_value,
            p_ss,
            alpha_ret: if mc.mode == Mode::Rpt { alpha } else { 0.0 },
            tau,
            lr,
            grad_norm: report.grad_norm,
            skipped: report.skipped,
        })
    }
}

//! Span-by-span inference with key/value caches.
//!
//! Each span of the window plan is processed once: its new tokens attend to
//! the cached keys/values of the preceding context tokens, chunks completed by
//! the span are embedded and retrieve from every earlier chunk, and the upper
//! decoder cross-attends to the gated neighbors of completed chunks.

use super::{
    cca_ranges, check_neighbors, check_source, resolve_neighbors, top_k, Mode, Model, NeighborSource, Session,
};
use crate::corpus::plan_windows;
use crate::error::{Result, RptError};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedOutput {
    /// `nll[p]` is the negative log-likelihood of token `p + 1`.
    pub nll: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
    /// One gate per `(chunk, slot)`; empty for models without neighbors.
    pub gates: Vec<f64>,
    /// Retriever scores of chunk `i` against chunks `0..=i` (unmasked), rpt mode only.
    pub scores: Vec<Vec<f64>>,
}

impl CachedOutput {
    pub fn mean_nll(&self) -> f64 {
        if self.nll.is_empty() {
            0.0
        } else {
            self.nll.iter().sum::<f64>() / self.nll.len() as f64
        }
    }
}

fn tail(m: &Mat, keep: usize) -> Mat {
    m.slice_rows(m.rows - keep.min(m.rows), m.rows)
}

fn append(hist: &mut Mat, rows: &Mat) {
    *hist = Mat::vstack(&[hist, rows]);
}

pub fn run(model: &Model, tokens: &[u32], source: &NeighborSource) -> Result<CachedOutput> {
    let c = &model.config;
    check_source(c.mode, source)?;
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(RptError::Precondition(format!("token {t} outside vocabulary {}", c.vocab_size)));
    }
    let n = tokens.len();
    let plan = plan_windows(n, c.window, c.stride)?;
    let (m, d, inner) = (c.m, c.d, c.inner_dim());
    let n_chunks = n / m;
    let block_rows = c.k * 2 * m;
    let n_layers = model.lower.len() + model.upper.len();
    let mut caches = vec![(Mat::zeros(0, inner), Mat::zeros(0, inner)); n_layers];
    let mut nb_hist = Mat::zeros(0, d);
    let mut lower_hist = Mat::zeros(0, d);
    let mut emb_hist = Mat::zeros(0, d);
    let mut mean_hist = Mat::zeros(0, d);
    let mut gated_hist = Mat::zeros(0, d);
    let mut valid = Vec::new();
    let mut out = CachedOutput {
        nll: Vec::with_capacity(n.saturating_sub(1)),
        neighbors: Vec::new(),
        gates: Vec::new(),
        scores: Vec::new(),
    };
    let mut done = 0;

    for (si, span) in plan.spans.iter().enumerate() {
        let rows = span.output.clone();
        let ctx = rows.start - span.input.start;
        let keep_next = plan.spans.get(si + 1).map_or(0, |s| s.output.start - s.input.start);
        let mut s = Session::new(model, None);
        let positions: Vec<f64> = rows.clone().map(|p| p as f64).collect();
        let ranges: Vec<(usize, usize)> = (0..rows.len()).map(|r| (0, ctx + r + 1)).collect();
        let mut h = s.embed_tokens(&tokens[rows.clone()]);
        for (li, b) in model.lower.iter().enumerate() {
            debug_assert_eq!(caches[li].0.rows, ctx);
            let (nh, k, v) = s.block(b, h, &positions, Some(&caches[li]), ranges.clone(), None);
            h = nh;
            caches[li] = (
                tail(&Mat::vstack(&[&caches[li].0, s.value(k)]), keep_next),
                tail(&Mat::vstack(&[&caches[li].1, s.value(v)]), keep_next),
            );
        }

        let mut cca_input = None;
        if c.mode.uses_neighbors() {
            append(&mut lower_hist, s.value(h));
            let nb = s.norm(model.neighbor_norm.expect("neighbor norm"), h);
            append(&mut nb_hist, s.value(nb));
            let now_done = (rows.end / m).min(n_chunks);
            if now_done > done {
                if c.mode == Mode::Rpt {
                    let reprs = s.graph.input(lower_hist.slice_rows(done * m, now_done * m));
                    let e = s.embed_chunks(reprs);
                    let e = s.value(e).clone();
                    append(&mut emb_hist, &e);
                }
                let mut slots = Vec::new();
                for i in done..now_done {
                    if c.mode == Mode::Rpt {
                        let q = s.graph.input(emb_hist.slice_rows(i, i + 1));
                        let keys = s.graph.input(emb_hist.slice_rows(0, i + 1));
                        let row = s.retriever_scores(q, keys);
                        out.scores.push(s.value(row).data.clone());
                    }
                    let list = resolve_neighbors(source, i, || top_k(&out.scores[i], (i + 1).saturating_sub(c.w), c.k));
                    check_neighbors(i, &list, c.w, c.k)?;
                    slots.extend((0..c.k).map(|k| (i, list.get(k).copied())));
                    out.neighbors.push(list);
                }
                valid.extend(slots.iter().map(|s| s.1.is_some()));
                let nb_all = s.graph.input(nb_hist.clone());
                let raw = s.assemble(nb_all, &slots, now_done);
                let (mean, gates) = s.gates(raw, Some(&mean_hist), &valid);
                let gated = s.apply_gates(raw, gates);
                append(&mut mean_hist, &s.value(mean).clone());
                out.gates.extend_from_slice(&s.value(gates).data);
                append(&mut gated_hist, &s.value(gated).clone());
                done = now_done;
            }
            if gated_hist.rows > 0 {
                cca_input = Some(s.graph.input(gated_hist.clone()));
            }
        }

        let lower_n = model.lower.len();
        for (ui, b) in model.upper.iter().enumerate() {
            let li = lower_n + ui;
            let nbrs = match (cca_input, b.cca) {
                (Some(g), Some(_)) => Some((g, cca_ranges(rows.clone(), m, block_rows, done))),
                _ => None,
            };
            let (nh, k, v) = s.block(b, h, &positions, Some(&caches[li]), ranges.clone(), nbrs);
            h = nh;
            caches[li] = (
                tail(&Mat::vstack(&[&caches[li].0, s.value(k)]), keep_next),
                tail(&Mat::vstack(&[&caches[li].1, s.value(v)]), keep_next),
            );
        }
        let logits = s.logits(h);
        let lv = s.value(logits);
        for (r, p) in rows.clone().enumerate() {
            if p + 1 < n {
                out.nll.push(token_nll(lv.row(r), tokens[p + 1] as usize));
            }
        }
    }
    Ok(out)
}

pub(crate) fn token_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + z.ln() - row[target]
}

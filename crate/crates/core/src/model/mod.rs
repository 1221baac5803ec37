//! The network: a lower decoder whose outputs feed a chunk embedder and
//! retriever, neighbor assembly and gating, and an upper decoder that fuses
//! neighbors through chunked cross-attention.
//!
//! [`Model::forward`] runs a whole document through one tape with the
//! sliding-window pattern expressed as per-row key ranges; [`cached`] runs the
//! same computation span by span with explicit key/value caches.

pub mod cached;
mod config;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnSpec, Graph, Var};
use crate::corpus::plan_windows;
use crate::error::{Result, RptError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub use config::{Mode, ModelConfig};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    attn_norm: Norm,
    attn: Attention,
    cca: Option<(Norm, Attention)>,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Gate {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    w: ParamId,
}

/// Parameter handles for the retriever, exposed so training can address them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrieverHead {
    pub query: ParamId,
    pub key: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    tok_emb: ParamId,
    lower: Vec<Block>,
    upper: Vec<Block>,
    final_norm: Norm,
    neighbor_norm: Option<Norm>,
    query_attn: Option<Attention>,
    embedder: Option<(Norm, Attention)>,
    retriever: Option<RetrieverHead>,
    gate: Option<Gate>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn randn(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Mat::randn(rows, cols, std, &mut self.rng);
        self.store.add(name, m)
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let std = self.std;
        self.randn(name, rows, cols, std)
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Mat::filled(1, d, 1.0)),
            bias: self.store.add(format!("{name}.bias"), Mat::zeros(1, d)),
        }
    }

    fn attention(&mut self, name: &str, d: usize, inner: usize) -> Attention {
        Attention {
            q: self.weight(format!("{name}.q"), d, inner),
            k: self.weight(format!("{name}.k"), d, inner),
            v: self.weight(format!("{name}.v"), d, inner),
            o: self.weight(format!("{name}.o"), inner, d),
        }
    }

    fn block(&mut self, name: &str, c: &ModelConfig, cca: bool) -> Block {
        let (d, inner, hidden) = (c.d, c.inner_dim(), c.d * c.ffn_mult);
        let attn_norm = self.norm(&format!("{name}.attn_norm"), d);
        let attn = self.attention(&format!("{name}.attn"), d, inner);
        let cca =
            cca.then(|| (self.norm(&format!("{name}.cca_norm"), d), self.attention(&format!("{name}.cca"), d, inner)));
        let ffn_norm = self.norm(&format!("{name}.ffn_norm"), d);
        let ffn = FeedForward {
            w1: self.weight(format!("{name}.ffn.w1"), d, hidden),
            b1: self.store.add(format!("{name}.ffn.b1"), Mat::zeros(1, hidden)),
            w2: self.weight(format!("{name}.ffn.w2"), hidden, d),
            b2: self.store.add(format!("{name}.ffn.b2"), Mat::zeros(1, d)),
        };
        Block { attn_norm, attn, cca, ffn_norm, ffn }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), std: c.init_std };
        let tok_emb = init.weight("tok_emb".into(), c.vocab_size, c.d);
        let lower = (0..c.n_lower()).map(|l| init.block(&format!("lower.{l}"), c, false)).collect();
        let retrieval = c.mode.uses_neighbors();
        let neighbor_norm = retrieval.then(|| init.norm("neighbor_norm", c.d));
        let query_attn = (retrieval && c.neighbor_query_attention)
            .then(|| init.attention("neighbor_query_attn", c.d, c.inner_dim()));
        let (embedder, retriever) = if c.mode == Mode::Rpt {
            let e = (init.norm("chunk_embed.norm", c.d), init.attention("chunk_embed.attn", c.d, c.inner_dim()));
            let s = 1.0 / (c.d as f64).sqrt();
            let r = RetrieverHead {
                query: init.randn("retriever.query".into(), c.d, c.d, s),
                key: init.randn("retriever.key".into(), c.d, c.d, s),
            };
            (Some(e), Some(r))
        } else {
            (None, None)
        };
        let gate = (retrieval && c.neighbor_gating).then(|| Gate {
            q: init.weight("gate.q".into(), c.d, c.d),
            k: init.weight("gate.k".into(), c.d, c.d),
            v: init.weight("gate.v".into(), c.d, c.d),
            w: init.randn("gate.w".into(), c.d, 1, 0.02),
        });
        let upper = (0..c.n_upper()).map(|u| init.block(&format!("upper.{u}"), c, c.has_cca(u))).collect();
        let final_norm = init.norm("final_norm", c.d);
        Ok(Self {
            config,
            params: store,
            tok_emb,
            lower,
            upper,
            final_norm,
            neighbor_norm,
            query_attn,
            embedder,
            retriever,
            gate,
        })
    }

    pub fn retriever(&self) -> Option<RetrieverHead> {
        self.retriever
    }

    pub fn gate_weight(&self) -> Option<ParamId> {
        self.gate.map(|g| g.w)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Query-projection weights of every CCA layer.
    pub fn cca_params(&self) -> Vec<ParamId> {
        self.upper.iter().filter_map(|b| b.cca.map(|(_, a)| [a.q, a.k, a.v, a.o])).flatten().collect()
    }
}

/// Where the neighbors of each query chunk come from.
#[derive(Debug, Clone, PartialEq)]
pub enum NeighborSource {
    /// No neighbors: every slot falls back to the zero block.
    None,
    /// The model's own top-K by retriever score.
    Retrieve,
    /// Externally chosen indices per query chunk (BM25, oracle).
    Given(Vec<Vec<usize>>),
    /// Per-chunk override; `None` entries use the model's own retrieval.
    Mixed(Vec<Option<Vec<usize>>>),
}

/// Per-step dropout configuration.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// A tape plus parameter bindings for one forward (and optional backward) pass.
pub struct Session<'m> {
    pub graph: Graph,
    model: &'m Model,
    bound: Vec<Option<Var>>,
    dropout: Option<Dropout>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, dropout: Option<Dropout>) -> Self {
        let dropout = dropout.filter(|d| d.rate > 0.0);
        Self { graph: Graph::new(), model, bound: vec![None; model.params.len()], dropout }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.graph.param(&self.model.params, id);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.graph.value(v)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let Some(d) = self.dropout.as_mut() else { return x };
        let n = self.graph.value(x).len();
        let keep = 1.0 / (1.0 - d.rate);
        let mask = (0..n).map(|_| if d.rng.gen::<f64>() < d.rate { 0.0 } else { keep }).collect();
        self.graph.dropout(x, mask)
    }

    fn norm(&mut self, n: Norm, x: Var) -> Var {
        let (g, b) = (self.param(n.gain), self.param(n.bias));
        self.graph.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: Var, w: ParamId) -> Var {
        let w = self.param(w);
        self.graph.matmul(x, w)
    }

    /// Causal self-attention with rotary positions. Keys are the optional
    /// cache rows followed by this call's rows; `ranges` index that concatenation.
    fn self_attention(
        &mut self,
        a: Attention,
        x: Var,
        positions: &[f64],
        cache: Option<&(Mat, Mat)>,
        ranges: Vec<(usize, usize)>,
    ) -> (Var, Var, Var) {
        let c = &self.model.config;
        let (hd, heads, base) = (c.head_dim, c.n_heads, c.rope_base);
        let q = self.linear(x, a.q);
        let q = self.graph.rope(q, positions, hd, base);
        let k = self.linear(x, a.k);
        let k = self.graph.rope(k, positions, hd, base);
        let v = self.linear(x, a.v);
        let (k_all, v_all) = match cache {
            Some((ck, cv)) if ck.rows > 0 => {
                let (ck, cv) = (self.graph.input(ck.clone()), self.graph.input(cv.clone()));
                (self.graph.concat_rows(vec![ck, k]), self.graph.concat_rows(vec![cv, v]))
            }
            _ => (k, v),
        };
        let spec = Rc::new(AttnSpec::new(heads, hd, ranges));
        let out = self.graph.attention(q, k_all, v_all, spec);
        (self.linear(out, a.o), k, v)
    }

    /// Position-free multi-head attention from `xq` rows to `xkv` rows.
    fn cross_attention(
        &mut self,
        a: Attention,
        xq: Var,
        xkv: Var,
        ranges: Vec<(usize, usize)>,
        key_valid: Option<Vec<bool>>,
    ) -> Var {
        let c = &self.model.config;
        let mut spec = AttnSpec::new(c.n_heads, c.head_dim, ranges);
        spec.key_valid = key_valid;
        let q = self.linear(xq, a.q);
        let k = self.linear(xkv, a.k);
        let v = self.linear(xkv, a.v);
        let out = self.graph.attention(q, k, v, Rc::new(spec));
        self.linear(out, a.o)
    }

    fn feed_forward(&mut self, f: FeedForward, x: Var) -> Var {
        let h = self.linear(x, f.w1);
        let b1 = self.param(f.b1);
        let h = self.graph.add_row(h, b1);
        let h = self.graph.gelu(h);
        let h = self.linear(h, f.w2);
        let b2 = self.param(f.b2);
        self.graph.add_row(h, b2)
    }

    /// One pre-norm decoder block; returns the new hidden state and this
    /// call's rotated keys and values for caching.
    fn block(
        &mut self,
        b: &Block,
        h: Var,
        positions: &[f64],
        cache: Option<&(Mat, Mat)>,
        ranges: Vec<(usize, usize)>,
        neighbors: Option<(Var, Vec<(usize, usize)>)>,
    ) -> (Var, Var, Var) {
        let x = self.norm(b.attn_norm, h);
        let (a, k, v) = self.self_attention(b.attn, x, positions, cache, ranges);
        let a = self.dropout(a);
        let mut h = self.graph.add(h, a);
        if let (Some((norm, attn)), Some((block, cca_ranges))) = (b.cca, neighbors) {
            let x = self.norm(norm, h);
            let y = self.cross_attention(attn, x, block, cca_ranges, None);
            let y = self.dropout(y);
            h = self.graph.add(h, y);
        }
        let x = self.norm(b.ffn_norm, h);
        let f = self.feed_forward(b.ffn, x);
        let f = self.dropout(f);
        (self.graph.add(h, f), k, v)
    }

    fn embed_tokens(&mut self, tokens: &[u32]) -> Var {
        let table = self.param(self.model.tok_emb);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = self.graph.embedding(table, &ids);
        self.dropout(x)
    }

    fn logits(&mut self, h: Var) -> Var {
        let x = self.norm(self.model.final_norm, h);
        let table = self.param(self.model.tok_emb);
        self.graph.matmul_t(x, false, table, true)
    }

    /// Chunk embeddings for `reprs` (a whole number of chunks of lower-decoder rows).
    fn embed_chunks(&mut self, reprs: Var) -> Var {
        let m = self.model.config.m;
        let (norm, attn) = self.model.embedder.expect("chunk embedder in rpt mode");
        let rows = self.value(reprs).rows;
        let x = self.norm(norm, reprs);
        let ranges = (0..rows).map(|p| (p / m * m, (p / m + 1) * m)).collect();
        let a = self.cross_attention(attn, x, x, ranges, None);
        let y = self.graph.add(x, a);
        self.graph.group_mean(y, m)
    }

    /// Raw bilinear scores `<e_i W_Q, e_j W_K>` for query rows against key rows.
    fn retriever_scores(&mut self, queries: Var, keys: Var) -> Var {
        let head = self.model.retriever.expect("retriever in rpt mode");
        let q = self.linear(queries, head.query);
        let k = self.linear(keys, head.key);
        self.graph.matmul_t(q, false, k, true)
    }

    /// Gathers neighbor rows for `slots` and applies the optional
    /// query-chunk cross-attention. `nb` holds neighbor-normed rows of every
    /// token so far; `slots[s]` is `(query chunk, neighbor chunk)`.
    fn assemble(&mut self, nb: Var, slots: &[(usize, Option<usize>)], n_complete: usize) -> Var {
        let m = self.model.config.m;
        let mut idx = Vec::with_capacity(slots.len() * 2 * m);
        for &(_, j) in slots {
            for half in 0..2 {
                let chunk = j.map(|j| j + half).filter(|&c| c < n_complete);
                idx.extend((0..m).map(|r| chunk.map(|c| c * m + r)));
            }
        }
        let raw = self.graph.gather(nb, idx);
        let Some(qa) = self.model.query_attn else { return raw };
        let ranges = slots.iter().flat_map(|&(i, _)| std::iter::repeat((i * m, (i + 1) * m)).take(2 * m)).collect();
        let y = self.cross_attention(qa, raw, nb, ranges, None);
        let mask = slots
            .iter()
            .flat_map(|&(_, j)| std::iter::repeat(if j.is_some() { 1.0 } else { 0.0 }).take(2 * m))
            .collect::<Vec<_>>();
        let mask = self.graph.input(Mat::from_vec(mask.len(), 1, mask));
        let y = self.graph.mul_col(y, mask);
        self.graph.add(raw, y)
    }

    /// Mean neighbor vectors for `raw` (new slots), enriched by causal
    /// attention over all slots so far, mapped to gates in `[floor, 1)`.
    /// `history` holds the mean vectors of earlier slots, `valid` covers
    /// history and new slots. Returns `(mean vectors, gates)`.
    fn gates(&mut self, raw: Var, history: Option<&Mat>, valid: &[bool]) -> (Var, Var) {
        let c = &self.model.config;
        let (m, floor, d) = (c.m, c.gate_floor, c.d);
        let mean = self.graph.group_mean(raw, 2 * m);
        let n_new = self.value(mean).rows;
        let offset = history.map_or(0, |h| h.rows);
        let new_valid = &valid[offset..offset + n_new];
        let g = match self.model.gate {
            Some(gp) => {
                let all = match history {
                    Some(h) if h.rows > 0 => {
                        let h = self.graph.input(h.clone());
                        self.graph.concat_rows(vec![h, mean])
                    }
                    _ => mean,
                };
                let q = self.linear(mean, gp.q);
                let k = self.linear(all, gp.k);
                let v = self.linear(all, gp.v);
                let ranges = (0..n_new).map(|s| (0, offset + s + 1)).collect();
                let spec = AttnSpec::new(1, d, ranges).with_key_valid(valid.to_vec());
                let a = self.graph.attention(q, k, v, Rc::new(spec));
                let enriched = self.graph.add(mean, a);
                let logit = self.linear(enriched, gp.w);
                let logit = self.graph.scale(logit, 1.0 / d as f64);
                let s = self.graph.sigmoid(logit);
                self.graph.clamp_min(s, floor)
            }
            None => self.graph.input(Mat::filled(n_new, 1, 1.0)),
        };
        let keep: Vec<f64> = new_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f64> = new_valid.iter().map(|&v| if v { 0.0 } else { floor }).collect();
        let keep = self.graph.input(Mat::from_vec(n_new, 1, keep));
        let fill = self.graph.input(Mat::from_vec(n_new, 1, fill));
        let g = self.graph.mul(g, keep);
        let g = self.graph.add(g, fill);
        (mean, g)
    }

    fn apply_gates(&mut self, raw: Var, gates: Var) -> Var {
        let rows = 2 * self.model.config.m;
        let n = self.value(gates).rows;
        let expand = (0..n * rows).map(|r| Some(r / rows)).collect();
        let col = self.graph.gather(gates, expand);
        self.graph.mul_col(raw, col)
    }
}

/// Neighbor tensors for a forward pass, flattened to `(chunk, slot, row)` order.
#[derive(Debug, Clone)]
pub struct NeighborBlock {
    /// `(ℓ·K·2m) x d` rows before gating.
    pub raw: Var,
    /// `(ℓ·K) x 1` gates.
    pub gates: Var,
    /// `(ℓ·K·2m) x d` rows fed to chunked cross-attention.
    pub gated: Var,
    /// Whether each `(chunk, slot)` holds a neighbor.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub lower: Var,
    pub chunk_embeddings: Option<Var>,
    /// `ℓ x ℓ` unmasked retriever scores.
    pub scores: Option<Var>,
    pub neighbors: Vec<Vec<usize>>,
    pub block: Option<NeighborBlock>,
}

/// Sets entries with `j > i - w` to negative infinity.
pub fn mask_scores(raw: &Mat, w: usize) -> Mat {
    let mut out = raw.clone();
    for i in 0..out.rows {
        let end = (i + 1).saturating_sub(w);
        for j in end..out.cols {
            out.set(i, j, f64::NEG_INFINITY);
        }
    }
    out
}

/// Top-`k` finite entries per row, by score descending with ties to the lower index.
pub fn select_neighbors(masked: &Mat, k: usize) -> Vec<Vec<usize>> {
    (0..masked.rows).map(|i| top_k(masked.row(i), masked.cols, k)).collect()
}

/// Top-`k` finite entries among `scores[..end]`.
pub(crate) fn top_k(scores: &[f64], end: usize, k: usize) -> Vec<usize> {
    let mut row: Vec<(usize, f64)> = scores[..end].iter().copied().enumerate().filter(|(_, s)| s.is_finite()).collect();
    crate::lexical::rank_desc(&mut row);
    row.into_iter().take(k).map(|(j, _)| j).collect()
}

pub(crate) fn check_neighbors(i: usize, list: &[usize], w: usize, k: usize) -> Result<()> {
    if list.len() > k {
        return Err(RptError::Precondition(format!("chunk {i}: {} neighbors exceed K = {k}", list.len())));
    }
    if let Some(&j) = list.iter().find(|&&j| j + w > i) {
        return Err(RptError::Precondition(format!("chunk {i}: neighbor {j} is not retrievable (w = {w})")));
    }
    Ok(())
}

pub(crate) fn check_source(mode: Mode, source: &NeighborSource) -> Result<()> {
    match source {
        NeighborSource::Retrieve | NeighborSource::Mixed(_) if mode != Mode::Rpt => {
            Err(RptError::ModeMismatch(format!("self-retrieval requested from a {} model", mode.as_str())))
        }
        _ => Ok(()),
    }
}

/// Neighbors of chunk `i` under `source`; `own` computes the model's top-K lazily.
pub(crate) fn resolve_neighbors(source: &NeighborSource, i: usize, own: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
    match source {
        NeighborSource::None => Vec::new(),
        NeighborSource::Retrieve => own(),
        NeighborSource::Given(g) => g.get(i).cloned().unwrap_or_default(),
        NeighborSource::Mixed(g) => match g.get(i) {
            Some(Some(v)) => v.clone(),
            _ => own(),
        },
    }
}

fn slots_for(neighbors: &[Vec<usize>], k: usize) -> Vec<(usize, Option<usize>)> {
    neighbors.iter().enumerate().flat_map(|(i, n)| (0..k).map(move |s| (i, n.get(s).copied()))).collect()
}

/// CCA key range per hidden row: position `p` belongs to the span of chunk
/// `(p + 1) / m - 1`, which runs from that chunk's last token to the token
/// before the next chunk's last one. Rows before the first span get none.
pub(crate) fn cca_ranges(
    positions: std::ops::Range<usize>,
    m: usize,
    rows_per_chunk: usize,
    n_chunks: usize,
) -> Vec<(usize, usize)> {
    positions
        .map(|p| {
            let i = (p + 1) / m;
            if i == 0 || i > n_chunks {
                (0, 0)
            } else {
                ((i - 1) * rows_per_chunk, i * rows_per_chunk)
            }
        })
        .collect()
}

impl Model {
    /// Full-document forward pass on `session`'s tape.
    pub fn forward(&self, s: &mut Session, tokens: &[u32], source: &NeighborSource) -> Result<ForwardOutput> {
        let c = &self.config;
        check_source(c.mode, source)?;
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(RptError::Precondition(format!("token {t} outside vocabulary {}", c.vocab_size)));
        }
        let n = tokens.len();
        let plan = plan_windows(n, c.window, c.stride)?;
        let ranges = plan.key_ranges();
        let positions: Vec<f64> = (0..n).map(|p| p as f64).collect();
        let mut h = s.embed_tokens(tokens);
        for b in &self.lower {
            h = s.block(b, h, &positions, None, ranges.clone(), None).0;
        }
        let lower = h;
        let n_chunks = n / c.m;

        let mut out = ForwardOutput {
            logits: lower,
            lower,
            chunk_embeddings: None,
            scores: None,
            neighbors: vec![Vec::new(); n_chunks],
            block: None,
        };
        if c.mode.uses_neighbors() {
            if c.mode == Mode::Rpt && n_chunks > 0 {
                let reprs = s.graph.slice_rows(lower, 0, n_chunks * c.m);
                let e = s.embed_chunks(reprs);
                let scores = s.retriever_scores(e, e);
                out.chunk_embeddings = Some(e);
                out.scores = Some(scores);
            }
            for i in 0..n_chunks {
                let list = resolve_neighbors(source, i, || {
                    let scores = s.value(out.scores.expect("scores in rpt mode"));
                    top_k(scores.row(i), (i + 1).saturating_sub(c.w), c.k)
                });
                check_neighbors(i, &list, c.w, c.k)?;
                out.neighbors[i] = list;
            }
            let nb = s.norm(self.neighbor_norm.expect("neighbor norm"), lower);
            let slots = slots_for(&out.neighbors, c.k);
            let valid: Vec<bool> = slots.iter().map(|s| s.1.is_some()).collect();
            let raw = s.assemble(nb, &slots, n_chunks);
            let (_, gates) = s.gates(raw, None, &valid);
            let gated = s.apply_gates(raw, gates);
            out.block = Some(NeighborBlock { raw, gates, gated, valid });
        }

        let block_rows = c.k * 2 * c.m;
        for b in &self.upper {
            let nbrs = match (&out.block, b.cca) {
                (Some(block), Some(_)) => Some((block.gated, cca_ranges(0..n, c.m, block_rows, n_chunks))),
                _ => None,
            };
            h = s.block(b, h, &positions, None, ranges.clone(), nbrs).0;
        }
        out.logits = s.logits(h);
        Ok(out)
    }
}

/// Next-token targets for positions `0..n`; the last position has none.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = tokens.iter().skip(1).map(|&x| Some(x as usize)).collect();
    t.push(None);
    t
}

//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Ops are deliberately
//! coarse (fused attention, layer norm, softmax cross-entropy) so a forward
//! pass over a document is a few hundred nodes rather than tens of thousands.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_t, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention pattern: query row `r` may attend to key rows `ranges[r].0..ranges[r].1`,
/// restricted to keys flagged valid when `key_valid` is present. Rows with no
/// admissible key produce a zero output.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub heads: usize,
    pub scale: f64,
    pub ranges: Vec<(usize, usize)>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnSpec {
    pub fn new(heads: usize, head_dim: usize, ranges: Vec<(usize, usize)>) -> Self {
        Self { heads, scale: 1.0 / (head_dim as f64).sqrt(), ranges, key_valid: None }
    }

    pub fn with_key_valid(mut self, valid: Vec<bool>) -> Self {
        self.key_valid = Some(valid);
        self
    }

    #[inline]
    fn admissible(&self, j: usize) -> bool {
        self.key_valid.as_ref().map_or(true, |v| v[j])
    }
}

/// One LambdaRank-style hinge term `weight * max(0, margin - (s[hi] - s[lo]))`,
/// with `hi`/`lo` flat indices into the score matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingePair {
    pub hi: usize,
    pub lo: usize,
    pub weight: f64,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    ClampMin(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, rstd: Vec<f64> },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, spec: Rc<AttnSpec>, probs: Vec<f64>, offsets: Vec<usize> },
    Gather { a: Var, idx: Vec<Option<usize>> },
    Concat(Vec<Var>),
    GroupMean { a: Var, group: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Mat, count: usize },
    PairHinge { scores: Var, pairs: Vec<HingePair>, margin: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter that reached it,
/// indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Sum `other` into `self` (parameter-wise, in index order).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.add_assign(s),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul_t(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a (n x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, self.value(a).cols), "add_row shape");
        let r = r.data.clone();
        let mut value = self.value(a).clone();
        for chunk in value.data.chunks_mut(r.len().max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (n x c) * col (n x 1)`: scales each row of `a` by the matching entry.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((cv.rows, cv.cols), (av.rows, 1), "mul_col shape");
        let mut value = av.clone();
        for r in 0..av.rows {
            let s = cv.data[r];
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| gelu(x)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| sigmoid(x)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Elementwise `max(floor, a)`; the gradient is passed only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x.max(floor)).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(value, Op::ClampMin(a, floor), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        assert_eq!((g.len(), b.len()), (c, c), "layer_norm parameter width");
        let mut xhat = Mat::zeros(n, c);
        let mut out = Mat::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for i in 0..c {
                xh[i] = (row[i] - mean) * rs;
            }
            let o = out.row_mut(r);
            for i in 0..c {
                o[i] = xh[i] * g[i] + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Rotary position encoding applied per head to adjacent column pairs.
    pub fn rope(&mut self, x: Var, positions: &[f64], head_dim: usize, base: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert_eq!(positions.len(), n, "rope positions");
        assert!(head_dim % 2 == 0 && c % head_dim == 0, "rope head_dim");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let theta = p * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let mut out = xv.clone();
        for r in 0..n {
            let row = xv.row(r);
            let o = out.row_mut(r);
            for h in 0..c / head_dim {
                for i in 0..half {
                    let (cs, sn) = (cos[r * half + i], sin[r * half + i]);
                    let a = h * head_dim + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    o[a] = x0 * cs - x1 * sn;
                    o[a + 1] = x0 * sn + x1 * cs;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Rope { x, cos, sin, head_dim }, ng)
    }

    /// Multi-head scaled dot-product attention with explicit per-row key ranges.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Rc<AttnSpec>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols, kv.cols, "attention q/k width");
        assert_eq!(kv.rows, vv.rows, "attention k/v rows");
        assert_eq!(spec.ranges.len(), qv.rows, "attention ranges");
        let heads = spec.heads;
        assert!(qv.cols % heads == 0 && vv.cols % heads == 0, "attention heads");
        let dk = qv.cols / heads;
        let dv = vv.cols / heads;
        let mut out = Mat::zeros(qv.rows, vv.cols);
        let mut offsets = Vec::with_capacity(qv.rows + 1);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for r in 0..qv.rows {
            offsets.push(probs.len());
            let (lo, hi) = spec.ranges[r];
            let hi = hi.min(kv.rows);
            let len = hi.saturating_sub(lo);
            let qrow = qv.row(r);
            for h in 0..heads {
                scores.clear();
                let qh = &qrow[h * dk..(h + 1) * dk];
                let mut max = f64::NEG_INFINITY;
                for j in lo..hi {
                    if spec.admissible(j) {
                        let kh = &kv.row(j)[h * dk..(h + 1) * dk];
                        let s = spec.scale * dot(qh, kh);
                        max = max.max(s);
                        scores.push(s);
                    } else {
                        scores.push(f64::NEG_INFINITY);
                    }
                }
                let base = probs.len();
                if max == f64::NEG_INFINITY {
                    probs.extend(std::iter::repeat(0.0).take(len));
                    continue;
                }
                let mut z = 0.0;
                for s in &scores {
                    let e = (s - max).exp();
                    z += e;
                    probs.push(e);
                }
                for p in &mut probs[base..] {
                    *p /= z;
                }
                let o = &mut out.row_mut(r)[h * dv..(h + 1) * dv];
                for (jj, j) in (lo..hi).enumerate() {
                    let p = probs[base + jj];
                    if p != 0.0 {
                        let vh = &vv.row(j)[h * dv..(h + 1) * dv];
                        for (oi, vi) in o.iter_mut().zip(vh) {
                            *oi += p * vi;
                        }
                    }
                }
            }
        }
        offsets.push(probs.len());
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs, offsets }, ng)
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(o).copy_from_slice(av.row(i));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Gather { a, idx }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.gather(a, (start..end).map(Some).collect())
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Mat::vstack(&mats);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::Concat(parts), ng)
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows % group == 0, "group_mean rows");
        let n = av.rows / group;
        let mut out = Mat::zeros(n, av.cols);
        for g in 0..n {
            let o = out.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (oi, x) in o.iter_mut().zip(av.row(r)) {
                    *oi += x;
                }
            }
            for oi in o.iter_mut() {
                *oi /= group as f64;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupMean { a, group }, ng)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols);
        for (o, &i) in ids.iter().enumerate() {
            out.row_mut(o).copy_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Inverted dropout with a caller-supplied keep mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len(), "dropout mask");
        let data = av.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(value, Op::Dropout { a, mask }, ng)
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows, "cross_entropy targets");
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let p = probs.row_mut(r);
            for (pi, x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += max + z.ln() - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(Mat::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, ng)
    }

    pub fn pair_hinge(&mut self, scores: Var, pairs: Vec<HingePair>, margin: f64) -> Var {
        let sv = &self.value(scores).data;
        let loss = pairs.iter().map(|p| p.weight * (margin - (sv[p.hi] - sv[p.lo])).max(0.0)).sum();
        let ng = self.ng(scores);
        self.push(Mat::scalar(loss), Op::PairHinge { scores, pairs, margin }, ng)
    }

    /// `sum_i w_i * x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let (r, c) = self.value(terms[0].0).shape();
        let mut value = Mat::zeros(r, c);
        for (v, w) in &terms {
            for (o, x) in value.data.iter_mut().zip(&self.value(*v).data) {
                *o += w * x;
            }
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(value, Op::WeightedSum(terms), ng)
    }

    /// Back-propagate from scalar `loss` and return parameter gradients.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Gradients::empty(n_params);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>], out: &mut Gradients) {
        let mut acc = |grads: &mut [Option<Mat>], v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.grads[id.index()] {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            },
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = op(A) op(B); dA = dC op(B)^T (transposed back if ta)
                    let da = if *ta { matmul_t(bv, *tb, g, true) } else { matmul_t(g, false, bv, !*tb) };
                    acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *tb { matmul_t(g, true, av, *ta) } else { matmul_t(av, !*ta, g, false) };
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut dr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.ng(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.ng(*a) {
                    let mut da = g.clone();
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        for x in da.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.ng(*col) {
                    let mut dc = Mat::zeros(cv.rows, 1);
                    for r in 0..g.rows {
                        dc.data[r] = dot(g.row(r), av.row(r));
                    }
                    acc(grads, *col, dc);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g.data.iter().zip(&av.data).map(|(gi, &x)| gi * gelu_grad(x)).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                let d = g.data.iter().zip(&av.data).map(|(gi, &x)| if x > *floor { *gi } else { 0.0 }).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &self.value(*gain).data;
                let (n, c) = g.shape();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for r in 0..n {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for i in 0..c {
                            dg.data[i] += gr[i] * xr[i];
                            db.data[i] += gr[i];
                        }
                    }
                    acc(grads, *gain, dg);
                    acc(grads, *bias, db);
                }
                if self.ng(*x) {
                    let mut dx = Mat::zeros(n, c);
                    let mut dxh = vec![0.0; c];
                    for r in 0..n {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..c {
                            dxh[i] = gr[i] * gv[i];
                            m1 += dxh[i];
                            m2 += dxh[i] * xr[i];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let o = dx.row_mut(r);
                        for i in 0..c {
                            o[i] = rstd[r] * (dxh[i] - m1 - xr[i] * m2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Rope { x, cos, sin, head_dim } => {
                let (n, c) = g.shape();
                let half = head_dim / 2;
                let mut dx = g.clone();
                for r in 0..n {
                    let gr = g.row(r);
                    let o = dx.row_mut(r);
                    for h in 0..c / head_dim {
                        for i in 0..half {
                            let (cs, sn) = (cos[r * half + i], sin[r * half + i]);
                            let a = h * head_dim + 2 * i;
                            let (g0, g1) = (gr[a], gr[a + 1]);
                            o[a] = g0 * cs + g1 * sn;
                            o[a + 1] = -g0 * sn + g1 * cs;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, spec, probs, offsets } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, offsets, grads, &mut acc);
            }
            Op::Gather { a, idx } => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (d, x) in da.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += x;
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    if self.ng(*p) {
                        acc(grads, *p, g.slice_rows(start, start + rows));
                    }
                    start += rows;
                }
            }
            Op::GroupMean { a, group } => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                let inv = 1.0 / *group as f64;
                for r in 0..av.rows {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *d = x * inv;
                    }
                }
                acc(grads, *a, da);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Mat::zeros(tv.rows, tv.cols);
                for (o, &i) in ids.iter().enumerate() {
                    for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += x;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::Dropout { a, mask } => {
                let d = g.data.iter().zip(mask).map(|(x, m)| x * m).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let scale = g.item() / *count as f64;
                let mut dl = Mat::zeros(probs.rows, probs.cols);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let o = dl.row_mut(r);
                    for (d, p) in o.iter_mut().zip(probs.row(r)) {
                        *d = p * scale;
                    }
                    o[t] -= scale;
                }
                acc(grads, *logits, dl);
            }
            Op::PairHinge { scores, pairs, margin } => {
                let sv = self.value(*scores);
                let mut ds = Mat::zeros(sv.rows, sv.cols);
                let up = g.item();
                for p in pairs {
                    if margin - (sv.data[p.hi] - sv.data[p.lo]) > 0.0 {
                        ds.data[p.hi] -= up * p.weight;
                        ds.data[p.lo] += up * p.weight;
                    }
                }
                acc(grads, *scores, ds);
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    let mut d = g.clone();
                    d.scale_assign(*w);
                    acc(grads, *v, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        offsets: &[usize],
        grads: &mut [Option<Mat>],
        acc: &mut impl FnMut(&mut [Option<Mat>], Var, Mat),
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = spec.heads;
        let dk = qv.cols / heads;
        let dv = vv.cols / heads;
        let mut dq = Mat::zeros(qv.rows, qv.cols);
        let mut dkm = Mat::zeros(kv.rows, kv.cols);
        let mut dvm = Mat::zeros(vv.rows, vv.cols);
        let mut dp = Vec::new();
        for r in 0..qv.rows {
            let (lo, hi) = spec.ranges[r];
            let hi = hi.min(kv.rows);
            let len = hi.saturating_sub(lo);
            if len == 0 {
                continue;
            }
            let grow = g.row(r);
            for h in 0..heads {
                let base = offsets[r] + h * len;
                let p = &probs[base..base + len];
                let go = &grow[h * dv..(h + 1) * dv];
                dp.clear();
                let mut sum = 0.0;
                for (jj, j) in (lo..hi).enumerate() {
                    if p[jj] == 0.0 {
                        dp.push(0.0);
                        continue;
                    }
                    let d = dot(go, &vv.row(j)[h * dv..(h + 1) * dv]);
                    sum += p[jj] * d;
                    dp.push(d);
                }
                let qh: Vec<f64> = qv.row(r)[h * dk..(h + 1) * dk].to_vec();
                for (jj, j) in (lo..hi).enumerate() {
                    let pj = p[jj];
                    if pj == 0.0 {
                        continue;
                    }
                    let ds = pj * (dp[jj] - sum) * spec.scale;
                    {
                        let kh = &kv.row(j)[h * dk..(h + 1) * dk];
                        let dqh = &mut dq.row_mut(r)[h * dk..(h + 1) * dk];
                        for (a, b) in dqh.iter_mut().zip(kh) {
                            *a += ds * b;
                        }
                    }
                    {
                        let dkh = &mut dkm.row_mut(j)[h * dk..(h + 1) * dk];
                        for (a, b) in dkh.iter_mut().zip(&qh) {
                            *a += ds * b;
                        }
                    }
                    let dvh = &mut dvm.row_mut(j)[h * dv..(h + 1) * dv];
                    for (a, b) in dvh.iter_mut().zip(go) {
                        *a += pj * b;
                    }
                }
            }
        }
        acc(grads, q, dq);
        acc(grads, k, dkm);
        acc(grads, v, dvm);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

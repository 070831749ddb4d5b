use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{gemm, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Identifier of a trainable parameter, assigned by the owner of the
/// parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub usize);

/// A contiguous run of rows forming one independent sequence in a packed
/// batch. Attention never crosses segment boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Constant,
    Param(ParamKey),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    ReplaceRows {
        x: usize,
        rows: Vec<usize>,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        logits: usize,
        rows: Vec<usize>,
        probs: Vec<f64>,
        log_ratio: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar loss, one entry per reachable trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamKey, Tensor>,
}

impl GradientMap {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.grads.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: GradientMap) {
        for (key, g) in other.grads {
            match self.grads.get_mut(&key) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(key, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all gradient entries, in key order.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable parameter. The tensor is shared, not copied.
    pub fn param(&self, key: ParamKey, value: Arc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Param(key), requires_grad: true });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Shares a parameter tensor without tracking its gradient.
    pub fn frozen(&self, value: Arc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Constant, requires_grad: false });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Row lookup `table[ids[i]]` for a `V × d` table.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Var<'t> {
        table.assert_tape(self);
        let t = self.value(table.id);
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < t.rows(), "embedding id {id} out of range {}", t.rows());
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor { shape: vec![ids.len(), d], data: out };
        self.push(value, Op::Embedding { table: table.id, ids: ids.to_vec() }, self.needs_grad(table.id))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N × d`; row `i` of segment `s` attends to rows
    /// `s.start..=i`. Heads split the columns evenly.
    pub fn causal_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        segments: &[Segment],
    ) -> Var<'t> {
        let (qv, kv, vv) = (self.value(q.id), self.value(k.id), self.value(v.id));
        assert_eq!(qv.shape(), kv.shape(), "attention q/k shape");
        assert_eq!(qv.shape(), vv.shape(), "attention q/v shape");
        let (n, d) = (qv.rows(), qv.cols());
        assert!(heads > 0 && d % heads == 0, "attention: {d} columns over {heads} heads");
        check_segments(segments, n);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let mut scores = Vec::new();
        let mut base = 0;
        for seg in segments {
            for h in 0..heads {
                let col = h * dh;
                for li in 0..seg.len {
                    let i = seg.start + li;
                    let qi = &qv.data[i * d + col..i * d + col + dh];
                    scores.clear();
                    for lj in 0..=li {
                        let j = seg.start + lj;
                        scores.push(dot(qi, &kv.data[j * d + col..j * d + col + dh]) * scale);
                    }
                    let prow = &mut probs[base + li * seg.len..base + li * seg.len + li + 1];
                    softmax_into(&scores, prow);
                    let orow = &mut out[i * d + col..i * d + col + dh];
                    for (lj, &p) in prow.iter().enumerate() {
                        let j = seg.start + lj;
                        axpy(p, &vv.data[j * d + col..j * d + col + dh], orow);
                    }
                }
                base += seg.len * seg.len;
            }
        }
        let rg = self.needs_grad(q.id) || self.needs_grad(k.id) || self.needs_grad(v.id);
        let op = Op::Attention { q: q.id, k: k.id, v: v.id, heads, segments: segments.to_vec(), probs };
        self.push(Tensor { shape: vec![n, d], data: out }, op, rg)
    }

    /// Sum over rows with `mask[i]` of `-log softmax(logits[i])[targets[i]]`.
    pub fn masked_cross_entropy<'t>(&'t self, logits: Var<'t>, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let z = self.value(logits.id);
        let (t, v) = (z.rows(), z.cols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape(format!(
                "cross entropy over {t} rows with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![0.0; rows.len() * v];
        let mut picked = Vec::with_capacity(rows.len());
        let mut loss = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let target = targets[i];
            if target >= v {
                return Err(Error::Shape(format!("target {target} outside vocabulary {v}")));
            }
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut sum = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= sum;
            }
            loss += max + sum.ln() - row[target];
            picked.push(target);
        }
        let op = Op::CrossEntropy { logits: logits.id, rows, targets: picked, probs };
        Ok(self.push(Tensor::scalar(loss), op, self.needs_grad(logits.id)))
    }

    /// Sum over rows with `mask[i]` of `KL(softmax(logits[i]) || q[i])` for
    /// reference log-probabilities `q`.
    pub fn kl_to_reference<'t>(&'t self, logits: Var<'t>, reference_log_probs: &Tensor, mask: &[bool]) -> Result<Var<'t>> {
        let z = self.value(logits.id);
        let (t, v) = (z.rows(), z.cols());
        if reference_log_probs.shape() != z.shape() || mask.len() != t {
            return Err(Error::Shape(format!(
                "kl over {:?} logits with reference {:?} and {} mask entries",
                z.shape(),
                reference_log_probs.shape(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![0.0; rows.len() * v];
        let mut log_ratio = vec![0.0; rows.len() * v];
        let mut total = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let logp = super::log_softmax(z.row(i));
            let q = reference_log_probs.row(i);
            for j in 0..v {
                let p = logp[j].exp();
                let lr = logp[j] - q[j];
                probs[r * v + j] = p;
                log_ratio[r * v + j] = lr;
                total += p * lr;
            }
        }
        let op = Op::KlDivergence { logits: logits.id, rows, probs, log_ratio };
        Ok(self.push(Tensor::scalar(total), op, self.needs_grad(logits.id)))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// The tape is drained: every [`Var`] recorded on it becomes invalid.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradientMap> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let loss_node = nodes
            .get(loss.id)
            .ok_or_else(|| Error::Contract("tape was already consumed".into()))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::Contract("loss is detached from every trainable parameter".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = GradientMap::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(node, &g, &nodes, &mut grads, &mut out);
        }
        Ok(out)
    }
}

fn check_segments(segments: &[Segment], n: usize) {
    let mut next = 0;
    for s in segments {
        assert_eq!(s.start, next, "segments must tile the rows in order");
        assert!(s.len > 0, "empty segment");
        next += s.len;
    }
    assert_eq!(next, n, "segments cover {next} of {n} rows");
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Gradient buffer for `id`, created on first use; `None` for nodes that
/// do not require a gradient.
fn grad_entry<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, local: &[f64]) {
    if let Some(buf) = grad_entry(grads, nodes, id) {
        for (b, l) in buf.iter_mut().zip(local) {
            *b += l;
        }
    }
}

fn backprop_node(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>], out: &mut GradientMap) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Constant => {}
        Op::Param(key) => {
            let t = Tensor { shape: node.value.shape().to_vec(), data: g.to_vec() };
            out.accumulate(GradientMap { grads: BTreeMap::from([(*key, t)]) });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = grad_entry(grads, nodes, *a) {
                gemm(m, n, k, g, false, bv.data(), true, 1.0, ga);
            }
            if let Some(gb) = grad_entry(grads, nodes, *b) {
                gemm(k, m, n, av.data(), true, g, false, 1.0, gb);
            }
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g);
            add_into(grads, nodes, *b, g);
        }
        Op::AddRow(a, bias) => {
            add_into(grads, nodes, *a, g);
            let n = val(*bias).len();
            if let Some(gb) = grad_entry(grads, nodes, *bias) {
                for row in g.chunks_exact(n) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let local_a: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
            let local_b: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
            add_into(grads, nodes, *a, &local_a);
            add_into(grads, nodes, *b, &local_b);
        }
        Op::Scale(a, c) => {
            if let Some(ga) = grad_entry(grads, nodes, *a) {
                axpy(*c, g, ga);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_entry(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            if let Some(ga) = grad_entry(grads, nodes, *a) {
                for ((acc, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *acc += gi * gelu_grad(*xi);
                }
            }
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let n = y.cols();
            if let Some(ga) = grad_entry(grads, nodes, *a) {
                for ((yr, gr), dr) in y.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma).data();
            let n = gam.len();
            if let Some(gg) = grad_entry(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = grad_entry(grads, nodes, *beta) {
                for gr in g.chunks_exact(n) {
                    for j in 0..n {
                        gb[j] += gr[j];
                    }
                }
            }
            if let Some(gx) = grad_entry(grads, nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, ((gr, xr), dr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).enumerate() {
                    for j in 0..n {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dot(&dxhat, xr) / n as f64;
                    for j in 0..n {
                        dr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).cols();
            if let Some(gt) = grad_entry(grads, nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, segments, probs } => {
            backprop_attention(grads, nodes, g, (*q, *k, *v), *heads, segments, probs);
        }
        Op::ReplaceRows { x, rows } => {
            let cols = val(*x).cols();
            let mut local = g.to_vec();
            for &r in rows {
                local[r * cols..(r + 1) * cols].fill(0.0);
            }
            add_into(grads, nodes, *x, &local);
        }
        Op::SelectRows { x, rows } => {
            let cols = val(*x).cols();
            if let Some(gx) = grad_entry(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        gx[r * cols + j] += g[i * cols + j];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, rows, targets, probs } => {
            let v = val(*logits).cols();
            let g0 = g[0];
            if let Some(gl) = grad_entry(grads, nodes, *logits) {
                for (r, (&i, &t)) in rows.iter().zip(targets).enumerate() {
                    let dst = &mut gl[i * v..(i + 1) * v];
                    axpy(g0, &probs[r * v..(r + 1) * v], dst);
                    dst[t] -= g0;
                }
            }
        }
        Op::KlDivergence { logits, rows, probs, log_ratio } => {
            let v = val(*logits).cols();
            let g0 = g[0];
            if let Some(gl) = grad_entry(grads, nodes, *logits) {
                for (r, &i) in rows.iter().enumerate() {
                    let p = &probs[r * v..(r + 1) * v];
                    let lr = &log_ratio[r * v..(r + 1) * v];
                    let kl = dot(p, lr);
                    let dst = &mut gl[i * v..(i + 1) * v];
                    for j in 0..v {
                        dst[j] += g0 * p[j] * (lr[j] - kl);
                    }
                }
            }
        }
    }
}

fn backprop_attention(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    segments: &[Segment],
    probs: &[f64],
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = qv.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = Vec::new();
    let mut base = 0;
    for seg in segments {
        for h in 0..heads {
            let col = h * dh;
            for li in 0..seg.len {
                let i = seg.start + li;
                let gi = &g[i * d + col..i * d + col + dh];
                let prow = &probs[base + li * seg.len..base + li * seg.len + li + 1];
                dp.clear();
                for (lj, &p) in prow.iter().enumerate() {
                    let j = seg.start + lj;
                    dp.push(dot(gi, &vv.data()[j * d + col..j * d + col + dh]));
                    axpy(p, gi, &mut dv[j * d + col..j * d + col + dh]);
                }
                let s = dot(prow, &dp);
                for (lj, &p) in prow.iter().enumerate() {
                    let j = seg.start + lj;
                    let ds = p * (dp[lj] - s) * scale;
                    axpy(ds, &kv.data()[j * d + col..j * d + col + dh], &mut dq[i * d + col..i * d + col + dh]);
                    axpy(ds, &qv.data()[i * d + col..i * d + col + dh], &mut dk[j * d + col..j * d + col + dh]);
                }
            }
            base += seg.len * seg.len;
        }
    }
    add_into(grads, nodes, q, &dq);
    add_into(grads, nodes, k, &dk);
    add_into(grads, nodes, v, &dv);
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn assert_tape(&self, tape: &Tape) {
        assert!(std::ptr::eq(self.tape, tape), "vars from different tapes");
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// `self · rhs` for `m × k` and `k × n` matrices.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.cols(), b.rows(), "matmul {:?} x {:?}", a.shape(), b.shape());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        self.binary(rhs, Tensor { shape: vec![m, n], data: c }, Op::MatMul(self.id, rhs.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "add shape");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.binary(rhs, Tensor { shape: a.shape().to_vec(), data }, Op::Add(self.id, rhs.id))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let (a, b) = (self.value(), bias.value());
        let n = a.cols();
        assert_eq!(b.len(), n, "add_row bias length");
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.binary(bias, Tensor { shape: a.shape().to_vec(), data }, Op::AddRow(self.id, bias.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul shape");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.binary(rhs, Tensor { shape: a.shape().to_vec(), data }, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.unary(Tensor { shape: a.shape().to_vec(), data }, Op::Scale(self.id, c))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        self.unary(Tensor { shape: a.shape().to_vec(), data }, Op::Gelu(self.id))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let mut data = vec![0.0; a.len()];
        for (src, dst) in a.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_into(src, dst);
        }
        self.unary(Tensor { shape: a.shape().to_vec(), data }, Op::Softmax(self.id))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let n = x.cols();
        assert_eq!(gm.len(), n, "layer_norm gamma length");
        assert_eq!(bt.len(), n, "layer_norm beta length");
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; x.len()];
        for ((xr, hr), or) in x.data().chunks_exact(n).zip(xhat.chunks_exact_mut(n)).zip(out.chunks_exact_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                hr[j] = (xr[j] - mean) * r;
                or[j] = hr[j] * gm.data()[j] + bt.data()[j];
            }
            rstd.push(r);
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        self.tape.push(Tensor { shape: x.shape().to_vec(), data: out }, op, rg)
    }

    /// Overwrites whole rows with constant values; gradient flows only
    /// through the rows left in place.
    pub fn replace_rows(self, rows: &[(usize, &[f64])]) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for (r, v) in rows {
            assert!(*r < x.rows(), "replace_rows row {r} out of range");
            assert_eq!(v.len(), cols, "replace_rows width");
            data[r * cols..(r + 1) * cols].copy_from_slice(v);
        }
        let op = Op::ReplaceRows { x: self.id, rows: rows.iter().map(|(r, _)| *r).collect() };
        self.unary(Tensor { shape: x.shape().to_vec(), data }, op)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(self, rows: &[usize]) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let op = Op::SelectRows { x: self.id, rows: rows.to_vec() };
        self.unary(Tensor { shape: vec![rows.len(), cols], data }, op)
    }
}

//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Each training step builds a fresh [`Graph`] per clip: leaves are bound
//! (inputs by value, parameters by `Arc` so no copy happens), ops append
//! nodes, and [`Graph::backward`] walks the tape once in reverse creation
//! order. Backward frees consumed activations and auxiliary buffers as it
//! goes, so peak memory is dominated by the forward tape, which the
//! process-wide tracker in [`super::tensor::mem`] observes.
//!
//! Every op validates shapes up front and scans its output for non-finite
//! values, so a numerical fault surfaces at the op that produced it rather
//! than as a corrupted checkpoint many steps later. Leaves are not scanned:
//! a bad leaf is caught by the first op that consumes it.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} (node {node}): non-finite value at flat index {index}")]
    NonFinite {
        op: &'static str,
        node: usize,
        index: usize,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Value<E: Element> {
    Owned(Tensor<E>),
    Shared(Arc<Tensor<E>>),
}

impl<E: Element> Value<E> {
    fn get(&self) -> &Tensor<E> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    /// y = x·W + b, bias broadcast over rows.
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    /// Single-head scaled-dot-product attention over one sequence.
    AttnHead {
        q: NodeId,
        k: NodeId,
        v: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    /// Scatter `content` rows to `unmasked` slots and broadcast the `fill`
    /// row into every `masked` slot of an n-row output.
    Assemble {
        content: NodeId,
        fill: NodeId,
        masked: Arc<Vec<usize>>,
        unmasked: Arc<Vec<usize>>,
    },
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    MeanRows {
        x: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    /// InfoNCE with in-sequence negatives: row i of `c` is scored against
    /// every row of `x`; the diagonal pairing is the positive.
    InfoNceDiag {
        c: NodeId,
        x: NodeId,
    },
    /// Mean cross-entropy of row b against class index labels[b].
    CrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<usize>>,
    },
}

enum Aux<E: Element> {
    None,
    /// Per-row mean and reciprocal std saved by LayerNorm.
    Rows {
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    /// Row-stochastic matrix saved by softmax-bearing ops.
    Probs(Tensor<E>),
}

struct Node<E: Element> {
    op: Op,
    value: Option<Value<E>>,
    aux: Aux<E>,
    needs_grad: bool,
    grad: Option<Tensor<E>>,
}

const LN_EPS: f64 = 1e-5;

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    named_params: BTreeMap<String, NodeId>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            named_params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf (no gradient flows into it).
    pub fn input(&mut self, t: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, Value::Owned(t), Aux::None, false)
    }

    /// Trainable leaf sharing storage with the caller; its gradient is
    /// available after [`Self::backward`].
    pub fn param(&mut self, t: Arc<Tensor<E>>) -> NodeId {
        self.push(Op::Leaf, Value::Shared(t), Aux::None, true)
    }

    /// A param leaf registered under a name, so optimizers can collect
    /// gradients keyed the same way the parameter store is. Binding a name
    /// twice returns the first node (a parameter appears once per graph).
    pub fn param_named(&mut self, name: &str, t: Arc<Tensor<E>>) -> NodeId {
        if let Some(&id) = self.named_params.get(name) {
            return id;
        }
        let id = self.param(t);
        self.named_params.insert(name.to_string(), id);
        id
    }

    /// Gradients of every named parameter that received one, keyed by name.
    /// Call after [`Self::backward`]; each gradient is moved out.
    pub fn take_named_grads(&mut self) -> BTreeMap<String, Tensor<E>> {
        let ids: Vec<(String, NodeId)> = self
            .named_params
            .iter()
            .map(|(n, &i)| (n.clone(), i))
            .collect();
        let mut out = BTreeMap::new();
        for (name, id) in ids {
            if let Some(g) = self.take_grad(id) {
                out.insert(name, g);
            }
        }
        out
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node value freed by backward; read values before calling backward")
            .get()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> E {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "scalar() on node with {} elements", t.numel());
        t.data()[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.nodes[id.0].grad.take()
    }

    fn push(&mut self, op: Op, value: Value<E>, aux: Aux<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            aux,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        op: Op,
        value: Tensor<E>,
        aux: Aux<E>,
        parents: &[NodeId],
    ) -> Result<NodeId, NnError> {
        if let Some(index) = value.first_non_finite() {
            return Err(NnError::NonFinite {
                op: op_name,
                node: self.nodes.len(),
                index,
            });
        }
        let needs_grad = self.any_needs_grad(parents);
        Ok(self.push(op, Value::Owned(value), aux, needs_grad))
    }

    // ---- op constructors ----

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, kx) = self.value(x).dim2();
        let (kw, n) = self.value(w).dim2();
        let bn = self.value(b).numel();
        if kx != kw || bn != n || self.value(b).shape().len() != 1 {
            return Err(shape_err(
                "linear",
                format!("x [{}x{}], w [{}x{}], b [{}]", m, kx, kw, n, bn),
            ));
        }
        let mut y = gemm_nn(self.value(x), self.value(w));
        let bias = self.value(b).data().to_vec();
        for r in 0..m {
            for (yv, bv) in y.row_mut(r).iter_mut().zip(bias.iter()) {
                *yv += *bv;
            }
        }
        self.finish("linear", Op::Linear { x, w, b }, y, Aux::None, &[x, w, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.finish("add", Op::Add { a, b }, y, Aux::None, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NnError> {
        let mut y = self.value(x).clone();
        y.scale_assign(E::from_f64(c));
        self.finish("scale", Op::Scale { x, c }, y, Aux::None, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NnError> {
        let (rows, cols) = self.value(x).dim2();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x [{}x{}], gamma [{}], beta [{}]",
                    rows,
                    cols,
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        let mut y = Tensor::zeros(&[rows, cols]);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_n = E::from_f64(1.0 / cols as f64);
        {
            let xv = self.value(x);
            let g = self.value(gamma).data().to_vec();
            let bt = self.value(beta).data().to_vec();
            for r in 0..rows {
                let xr = xv.row(r);
                let mut mean = E::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean = mean * inv_n;
                let mut var = E::ZERO;
                for &v in xr {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_n;
                let rstd = E::ONE / (var + E::from_f64(LN_EPS)).sqrt_e();
                let yr = y.row_mut(r);
                for c in 0..cols {
                    yr[c] = (xr[c] - mean) * rstd * g[c] + bt[c];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        self.finish(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta },
            y,
            Aux::Rows {
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let y = {
            let xv = self.value(x);
            let mut y = xv.clone();
            for v in y.data_mut().iter_mut() {
                *v = gelu_fwd(*v);
            }
            y
        };
        self.finish("gelu", Op::Gelu { x }, y, Aux::None, &[x])
    }

    /// Scaled dot-product attention for a single head; keeps only the
    /// attention probabilities for backward.
    pub fn attn_head(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, NnError> {
        let (lq, dh) = self.value(q).dim2();
        let (lk, dhk) = self.value(k).dim2();
        let (lv, dhv) = self.value(v).dim2();
        if lq != lk || lk != lv || dh != dhk || dh != dhv {
            return Err(shape_err(
                "attn_head",
                format!("q [{}x{}], k [{}x{}], v [{}x{}]", lq, dh, lk, dhk, lv, dhv),
            ));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut s = gemm_nt(self.value(q), self.value(k));
        s.scale_assign(E::from_f64(scale));
        softmax_rows_in_place(&mut s);
        let out = gemm_nn(&s, self.value(v));
        self.finish(
            "attn_head",
            Op::AttnHead { q, k, v },
            out,
            Aux::Probs(s),
            &[q, k, v],
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let (rows, cols) = self.value(x).dim2();
        if start + len > cols || len == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("[{}..{}) of {} cols", start, start + len, cols),
            ));
        }
        let mut y = Tensor::zeros(&[rows, len]);
        for r in 0..rows {
            let src = &self.value(x).row(r)[start..start + len];
            y.row_mut(r).copy_from_slice(src);
        }
        self.finish(
            "slice_cols",
            Op::SliceCols { x, start, len },
            y,
            Aux::None,
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).dim2().0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dim2();
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts {} vs {}", rows, r),
                ));
            }
            total += c;
        }
        let mut y = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.value(p).dim2();
            for r in 0..rows {
                y.row_mut(r)[off..off + c].copy_from_slice(self.value(p).row(r));
            }
            off += c;
        }
        self.finish(
            "concat_cols",
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            y,
            Aux::None,
            parts,
        )
    }

    /// Rebuild a full-length sequence: rows of `content` go to the
    /// `unmasked` slots, the single `fill` row goes to every `masked` slot.
    /// `masked` and `unmasked` must be strictly increasing and together
    /// partition `0..n`.
    pub fn assemble(
        &mut self,
        content: NodeId,
        fill: NodeId,
        masked: Arc<Vec<usize>>,
        unmasked: Arc<Vec<usize>>,
    ) -> Result<NodeId, NnError> {
        let (u, d) = self.value(content).dim2();
        let fill_len = self.value(fill).numel();
        if fill_len != d {
            return Err(shape_err(
                "assemble",
                format!("content width {} vs fill width {}", d, fill_len),
            ));
        }
        if u != unmasked.len() {
            return Err(shape_err(
                "assemble",
                format!("content rows {} vs unmasked count {}", u, unmasked.len()),
            ));
        }
        let n = masked.len() + unmasked.len();
        if !is_partition(&masked, &unmasked, n) {
            return Err(NnError::Invalid {
                op: "assemble",
                detail: format!("masked/unmasked do not partition 0..{}", n),
            });
        }
        let mut y = Tensor::zeros(&[n, d]);
        for (i, &slot) in unmasked.iter().enumerate() {
            y.row_mut(slot).copy_from_slice(self.value(content).row(i));
        }
        let fill_row = self.value(fill).data().to_vec();
        for &slot in masked.iter() {
            y.row_mut(slot).copy_from_slice(&fill_row);
        }
        self.finish(
            "assemble",
            Op::Assemble {
                content,
                fill,
                masked,
                unmasked,
            },
            y,
            Aux::None,
            &[content, fill],
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId, NnError> {
        let (rows, cols) = self.value(x).dim2();
        if idx.is_empty() {
            return Err(NnError::Invalid {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NnError::Invalid {
                op: "gather_rows",
                detail: format!("row index {} out of range {}", bad, rows),
            });
        }
        let mut y = Tensor::zeros(&[idx.len(), cols]);
        for (i, &r) in idx.iter().enumerate() {
            y.row_mut(i).copy_from_slice(self.value(x).row(r));
        }
        self.finish("gather_rows", Op::GatherRows { x, idx }, y, Aux::None, &[x])
    }

    /// Mean over rows: [L×d] → [1×d].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (rows, cols) = self.value(x).dim2();
        if rows == 0 {
            return Err(NnError::Invalid {
                op: "mean_rows",
                detail: "empty input".into(),
            });
        }
        let mut y = Tensor::zeros(&[1, cols]);
        {
            let xv = self.value(x);
            let acc = y.row_mut(0);
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
            }
            let inv = E::from_f64(1.0 / rows as f64);
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
        self.finish("mean_rows", Op::MeanRows { x }, y, Aux::None, &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, NnError> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(shape_err(
                "mse",
                format!(
                    "{:?} vs {:?}",
                    self.value(pred).shape(),
                    self.value(target).shape()
                ),
            ));
        }
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(NnError::Invalid {
                op: "mse",
                detail: "empty input".into(),
            });
        }
        let mut acc = E::ZERO;
        for (p, t) in self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
        {
            let d = *p - *t;
            acc += d * d;
        }
        let y = Tensor::from_vec(&[1], vec![acc * E::from_f64(1.0 / n as f64)]);
        self.finish(
            "mse",
            Op::Mse { pred, target },
            y,
            Aux::None,
            &[pred, target],
        )
    }

    /// InfoNCE where row i of `c` must pick out row i of `x` among all rows
    /// of `x`. Similarities are raw dot products. Requires at least 2 rows.
    pub fn info_nce_diag(&mut self, c: NodeId, x: NodeId) -> Result<NodeId, NnError> {
        let (kc, dc) = self.value(c).dim2();
        let (kx, dx) = self.value(x).dim2();
        if kc != kx || dc != dx {
            return Err(shape_err(
                "info_nce_diag",
                format!("c [{}x{}] vs x [{}x{}]", kc, dc, kx, dx),
            ));
        }
        if kc < 2 {
            return Err(NnError::Invalid {
                op: "info_nce_diag",
                detail: format!("need at least 2 rows for in-sequence negatives, got {}", kc),
            });
        }
        let mut sim = gemm_nt(self.value(c), self.value(x));
        // One pass: per-row log-sum-exp for the loss, softmax kept for backward.
        let mut loss = E::ZERO;
        let k = kc;
        for r in 0..k {
            let row = sim.row_mut(r);
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.max_e(v);
            }
            let mut denom = E::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp_e();
                denom += *v;
            }
            // log p(positive) = sim_rr - lse; after the shift, exp slot r holds
            // exp(sim_rr - mx) so ln of it restores the shifted logit.
            loss += denom.ln_e() - row[r].ln_e();
            let inv = E::ONE / denom;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let y = Tensor::from_vec(&[1], vec![loss * E::from_f64(1.0 / k as f64)]);
        self.finish(
            "info_nce_diag",
            Op::InfoNceDiag { c, x },
            y,
            Aux::Probs(sim),
            &[c, x],
        )
    }

    /// Mean cross-entropy of each logits row against its class index.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<usize>>,
    ) -> Result<NodeId, NnError> {
        let (rows, cols) = self.value(logits).dim2();
        if labels.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logit rows vs {} labels", rows, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(NnError::Invalid {
                op: "cross_entropy",
                detail: format!("label {} out of range {}", bad, cols),
            });
        }
        let mut probs = self.value(logits).clone();
        let mut loss = E::ZERO;
        for r in 0..rows {
            let row = probs.row_mut(r);
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.max_e(v);
            }
            let mut denom = E::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp_e();
                denom += *v;
            }
            loss += denom.ln_e() - row[labels[r]].ln_e();
            let inv = E::ONE / denom;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let y = Tensor::from_vec(&[1], vec![loss * E::from_f64(1.0 / rows as f64)]);
        self.finish(
            "cross_entropy",
            Op::CrossEntropy { logits, labels },
            y,
            Aux::Probs(probs),
            &[logits],
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Gradients of `param` leaves are
    /// left on their nodes; activations and auxiliary buffers are freed as
    /// they are consumed, and node values become unreadable afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Invalid {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(NnError::Invalid {
                op: "backward",
                detail: "loss does not depend on any trainable leaf".into(),
            });
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(&[1], E::ONE));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf grads stay for the caller
            }
            let deltas = self.backward_deltas(i)?;
            for (pid, delta) in deltas {
                match &mut self.nodes[pid.0].grad {
                    Some(g) => g.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
            // This node is fully consumed: free its value, aux and grad.
            let node = &mut self.nodes[i];
            node.value = None;
            node.aux = Aux::None;
            node.grad = None;
        }
        Ok(())
    }

    /// Gradients this node sends to each parent that wants one.
    fn backward_deltas(&self, i: usize) -> Result<Vec<(NodeId, Tensor<E>)>, NnError> {
        let node = &self.nodes[i];
        let dy = node
            .grad
            .as_ref()
            .expect("backward_deltas on node without grad");
        let mut out: Vec<(NodeId, Tensor<E>)> = Vec::new();
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if wants(*x) {
                    out.push((*x, gemm_nt(dy, self.value(*w))));
                }
                if wants(*w) {
                    out.push((*w, gemm_tn(self.value(*x), dy)));
                }
                if wants(*b) {
                    let (rows, n) = dy.dim2();
                    let mut db = Tensor::zeros(&[n]);
                    for r in 0..rows {
                        for (d, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, dy.clone()));
                }
                if wants(*b) {
                    out.push((*b, dy.clone()));
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    let mut dx = dy.clone();
                    dx.scale_assign(E::from_f64(*c));
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = dy.dim2();
                let (mean, rstd) = match &node.aux {
                    Aux::Rows { mean, rstd } => (mean, rstd),
                    _ => unreachable!("layer_norm aux missing"),
                };
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let inv_n = E::from_f64(1.0 / cols as f64);
                let mut dx = if wants(*x) {
                    Some(Tensor::zeros(&[rows, cols]))
                } else {
                    None
                };
                let mut dgamma = if wants(*gamma) {
                    Some(Tensor::zeros(&[cols]))
                } else {
                    None
                };
                let mut dbeta = if wants(*beta) {
                    Some(Tensor::zeros(&[cols]))
                } else {
                    None
                };
                let mut xhat = vec![E::ZERO; cols];
                for r in 0..rows {
                    let xr = xv.row(r);
                    let dyr = dy.row(r);
                    for c in 0..cols {
                        xhat[c] = (xr[c] - mean[r]) * rstd[r];
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        for (c, d) in dg.data_mut().iter_mut().enumerate() {
                            *d += dyr[c] * xhat[c];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for (c, d) in db.data_mut().iter_mut().enumerate() {
                            *d += dyr[c];
                        }
                    }
                    if let Some(dxt) = dx.as_mut() {
                        let mut h = E::ZERO;
                        let mut h2 = E::ZERO;
                        for c in 0..cols {
                            let dxhat = dyr[c] * g[c];
                            h += dxhat;
                            h2 += dxhat * xhat[c];
                        }
                        h = h * inv_n;
                        h2 = h2 * inv_n;
                        let dxr = dxt.row_mut(r);
                        for c in 0..cols {
                            let dxhat = dyr[c] * g[c];
                            dxr[c] = rstd[r] * (dxhat - h - xhat[c] * h2);
                        }
                    }
                }
                if let Some(t) = dx {
                    out.push((*x, t));
                }
                if let Some(t) = dgamma {
                    out.push((*gamma, t));
                }
                if let Some(t) = dbeta {
                    out.push((*beta, t));
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let mut dx = dy.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d = *d * gelu_bwd(xv);
                    }
                    out.push((*x, dx));
                }
            }
            Op::AttnHead { q, k, v } => {
                let p = match &node.aux {
                    Aux::Probs(p) => p,
                    _ => unreachable!("attn_head aux missing"),
                };
                let dh = self.value(*q).dim2().1;
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                if wants(*v) {
                    out.push((*v, gemm_tn(p, dy)));
                }
                if wants(*q) || wants(*k) {
                    let mut ds = gemm_nt(dy, self.value(*v)); // dP
                    let (l, _) = ds.dim2();
                    for r in 0..l {
                        let pr = p.row(r);
                        let dsr = ds.row_mut(r);
                        let mut dot = E::ZERO;
                        for c in 0..l {
                            dot += dsr[c] * pr[c];
                        }
                        for c in 0..l {
                            dsr[c] = pr[c] * (dsr[c] - dot) * scale;
                        }
                    }
                    if wants(*q) {
                        out.push((*q, gemm_nn(&ds, self.value(*k))));
                    }
                    if wants(*k) {
                        out.push((*k, gemm_tn(&ds, self.value(*q))));
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if wants(*x) {
                    let (rows, cols) = self.value(*x).dim2();
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + *len].copy_from_slice(dy.row(r));
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (rows, c) = self.value(p).dim2();
                    if wants(p) {
                        let mut dp = Tensor::zeros(&[rows, c]);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + c]);
                        }
                        out.push((p, dp));
                    }
                    off += c;
                }
            }
            Op::Assemble {
                content,
                fill,
                masked,
                unmasked,
            } => {
                let d = dy.dim2().1;
                if wants(*content) {
                    let mut dc = Tensor::zeros(&[unmasked.len(), d]);
                    for (i, &slot) in unmasked.iter().enumerate() {
                        dc.row_mut(i).copy_from_slice(dy.row(slot));
                    }
                    out.push((*content, dc));
                }
                if wants(*fill) {
                    // Every masked slot received the same row, so their
                    // gradients sum into it.
                    let mut df = Tensor::zeros(self.value(*fill).shape());
                    for &slot in masked.iter() {
                        for (d2, &g) in df.data_mut().iter_mut().zip(dy.row(slot)) {
                            *d2 += g;
                        }
                    }
                    out.push((*fill, df));
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let (rows, cols) = self.value(*x).dim2();
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, &g) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MeanRows { x } => {
                if wants(*x) {
                    let (rows, cols) = self.value(*x).dim2();
                    let inv = E::from_f64(1.0 / rows as f64);
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        for (d, &g) in dx.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *d = g * inv;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Mse { pred, target } => {
                let g0 = dy.data()[0];
                let n = self.value(*pred).numel();
                let coef = g0 * E::from_f64(2.0 / n as f64);
                if wants(*pred) || wants(*target) {
                    let mut dp = self.value(*pred).clone();
                    for (d, &t) in dp.data_mut().iter_mut().zip(self.value(*target).data()) {
                        *d = (*d - t) * coef;
                    }
                    if wants(*target) {
                        let mut dt = dp.clone();
                        dt.scale_assign(E::from_f64(-1.0));
                        out.push((*target, dt));
                    }
                    if wants(*pred) {
                        out.push((*pred, dp));
                    }
                }
            }
            Op::InfoNceDiag { c, x } => {
                let s = match &node.aux {
                    Aux::Probs(s) => s,
                    _ => unreachable!("info_nce aux missing"),
                };
                let k = s.dim2().0;
                let g0 = dy.data()[0];
                // d(loss)/d(sim) = (softmax - I) / K
                let mut dsim = s.clone();
                let coef = g0 * E::from_f64(1.0 / k as f64);
                for r in 0..k {
                    let row = dsim.row_mut(r);
                    row[r] = row[r] - E::ONE;
                    for vcell in row.iter_mut() {
                        *vcell = *vcell * coef;
                    }
                }
                if wants(*c) {
                    out.push((*c, gemm_nn(&dsim, self.value(*x))));
                }
                if wants(*x) {
                    out.push((*x, gemm_tn(&dsim, self.value(*c))));
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let s = match &node.aux {
                        Aux::Probs(s) => s,
                        _ => unreachable!("cross_entropy aux missing"),
                    };
                    let (rows, _) = s.dim2();
                    let g0 = dy.data()[0];
                    let mut dl = s.clone();
                    let coef = g0 * E::from_f64(1.0 / rows as f64);
                    for r in 0..rows {
                        let row = dl.row_mut(r);
                        row[labels[r]] = row[labels[r]] - E::ONE;
                        for vcell in row.iter_mut() {
                            *vcell = *vcell * coef;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
        }
        Ok(out)
    }
}

/// Numerically stable row softmax, in place.
pub fn softmax_rows_in_place<E: Element>(t: &mut Tensor<E>) {
    let (rows, _) = t.dim2();
    for r in 0..rows {
        let row = t.row_mut(r);
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max_e(v);
        }
        let mut denom = E::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp_e();
            denom += *v;
        }
        let inv = E::ONE / denom;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

// tanh-form GELU; forward and derivative must stay an exact pair for the
// finite-difference checks.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let u = c * (x + a * x * x * x);
    let half = E::from_f64(0.5);
    half * x * (E::ONE + u.tanh_e())
}

fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let three = E::from_f64(3.0);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh_e();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

fn is_partition(a: &[usize], b: &[usize], n: usize) -> bool {
    let increasing = |s: &[usize]| s.windows(2).all(|w| w[0] < w[1]);
    if !increasing(a) || !increasing(b) {
        return false;
    }
    // Merge-walk: together they must enumerate 0..n exactly once.
    let (mut i, mut j) = (0, 0);
    for expect in 0..n {
        let take_a = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x < y,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => return false,
        };
        let v = if take_a {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if v != expect {
            return false;
        }
    }
    i == a.len() && j == b.len()
}

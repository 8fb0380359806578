//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! Every operation appends one node holding its forward value. Node ids are
//! issued in creation order, so replaying the tape backwards visits each node
//! after all of its consumers. A tape is confined to one thread.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, layernorm_stats, logsumexp, Precision, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Geometry of a multi-head split: `[B*L, H*dh] <-> [B*H, L, dh]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    #[inline]
    fn split_index(&self, b: usize, h: usize, i: usize, j: usize) -> (usize, usize) {
        let d = self.heads * self.head_dim;
        let flat = (b * self.len + i) * d + h * self.head_dim + j;
        let split = ((b * self.heads + h) * self.len + i) * self.head_dim + j;
        (flat, split)
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for b in 0..self.batch {
            for h in 0..self.heads {
                for i in 0..self.len {
                    for j in 0..self.head_dim {
                        let (flat, split) = self.split_index(b, h, i, j);
                        f(flat, split);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Activate(NodeId, Activation),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SplitHeads(NodeId, HeadLayout),
    MergeHeads(NodeId, HeadLayout),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    MaskedSoftmax(NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<(usize, usize)>),
    ScaleRows(NodeId, NodeId),
    ScatterRows(Vec<(NodeId, Vec<usize>)>),
    DivRowSum(NodeId),
    Sum(NodeId),
    MaskedMeanPool {
        x: NodeId,
        batch: usize,
        len: usize,
        valid: Vec<bool>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn prec(&self, ids: &[NodeId]) -> Precision {
        ids.iter()
            .map(|i| self.nodes[i.0].value.precision())
            .fold(Precision::Single, Precision::join)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Binds a stored parameter as a differentiable leaf; repeated binds share a node.
    pub fn param(&mut self, id: ParamId, store: &ParamStore) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, store.get(id).clone(), true);
        self.params.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, self.ng(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, self.ng(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, self.ng(&[a]))
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let cols = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [cols] {
            return dim_err(format!("bias {:?} does not match rows of {:?}", bv.shape(), xv.shape()));
        }
        let p = self.prec(&[x, bias]);
        let data: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % cols])
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data, p)?;
        Ok(self.push(Op::AddBias(x, bias), v, self.ng(&[x, bias])))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, self.ng(&[a, b])))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), v, self.ng(&[a])))
    }

    pub fn activate(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = match act {
            Activation::Relu => self.value(a).map(|x| x.max(0.0)),
            Activation::Gelu => self.value(a).map(gelu),
        };
        self.push(Op::Activate(a, act), v, self.ng(&[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = tensor::softmax(x, x.rank().saturating_sub(1))?;
        Ok(self.push(Op::SoftmaxRows(a), v, self.ng(&[a])))
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = tensor::layernorm(xv, self.value(gain), self.value(bias))?;
        let cols = *xv.shape().last().unwrap_or(&1);
        let (mean, rstd) = layernorm_stats(xv.data(), cols);
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            v,
            ng,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("id {id} outside table of {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), cols], data, t.precision())?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            v,
            self.ng(&[table]),
        ))
    }

    pub fn split_heads(&mut self, x: NodeId, layout: HeadLayout) -> Result<NodeId> {
        let xv = self.value(x);
        let expect = [layout.batch * layout.len, layout.heads * layout.head_dim];
        if xv.shape() != expect {
            return dim_err(format!("split_heads expects {:?}, got {:?}", expect, xv.shape()));
        }
        let mut out = vec![0.0; xv.numel()];
        layout.for_each(|flat, split| out[split] = xv.data()[flat]);
        let shape = vec![layout.batch * layout.heads, layout.len, layout.head_dim];
        let v = Tensor::new(shape, out, xv.precision())?;
        Ok(self.push(Op::SplitHeads(x, layout), v, self.ng(&[x])))
    }

    pub fn merge_heads(&mut self, x: NodeId, layout: HeadLayout) -> Result<NodeId> {
        let xv = self.value(x);
        let expect = [layout.batch * layout.heads, layout.len, layout.head_dim];
        if xv.shape() != expect {
            return dim_err(format!("merge_heads expects {:?}, got {:?}", expect, xv.shape()));
        }
        let mut out = vec![0.0; xv.numel()];
        layout.for_each(|flat, split| out[flat] = xv.data()[split]);
        let shape = vec![layout.batch * layout.len, layout.heads * layout.head_dim];
        let v = Tensor::new(shape, out, xv.precision())?;
        Ok(self.push(Op::MergeHeads(x, layout), v, self.ng(&[x])))
    }

    /// `[n,p,q] x [n,q,r]`, or `[n,p,q] x [n,r,q]^T` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, p, q) = match av.shape() {
            &[n, p, q] => (n, p, q),
            s => return dim_err(format!("batch_matmul lhs must be rank 3, got {s:?}")),
        };
        let (n2, r) = match (bv.shape(), transpose_b) {
            (&[n2, r, q2], true) if q2 == q => (n2, r),
            (&[n2, q2, r], false) if q2 == q => (n2, r),
            (s, _) => return dim_err(format!("batch_matmul shapes disagree: {:?} x {:?}", av.shape(), s)),
        };
        if n != n2 {
            return dim_err(format!("batch extents disagree: {n} vs {n2}"));
        }
        let mut out = vec![0.0; n * p * r];
        for i in 0..n {
            let asl = &av.data()[i * p * q..(i + 1) * p * q];
            let bsl = &bv.data()[i * q * r..(i + 1) * q * r];
            let osl = &mut out[i * p * r..(i + 1) * p * r];
            if transpose_b {
                tensor::matmul_nt_into(asl, bsl, osl, p, q, r);
            } else {
                tensor::matmul_into(asl, bsl, osl, p, q, r);
            }
        }
        let prec = self.prec(&[a, b]);
        let v = Tensor::new(vec![n, p, r], out, prec)?;
        Ok(self.push(
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
            },
            v,
            self.ng(&[a, b]),
        ))
    }

    /// Softmax over the last axis of `[B*H, L, L]` scores. Keys that are
    /// padding (or in the future, when `causal`) get exactly zero weight.
    pub fn masked_softmax(
        &mut self,
        scores: NodeId,
        batch: usize,
        heads: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Result<NodeId> {
        let sv = self.value(scores);
        let len = match sv.shape() {
            &[bh, l, l2] if bh == batch * heads && l == l2 => l,
            s => return dim_err(format!("masked_softmax expects [{}, L, L], got {s:?}", batch * heads)),
        };
        if key_valid.len() != batch * len {
            return dim_err(format!("mask has {} entries for {}x{} tokens", key_valid.len(), batch, len));
        }
        let mut out = vec![0.0; sv.numel()];
        for b in 0..batch {
            let valid = &key_valid[b * len..(b + 1) * len];
            for h in 0..heads {
                for q in 0..len {
                    let base = ((b * heads + h) * len + q) * len;
                    let row = &sv.data()[base..base + len];
                    let allowed = |k: usize| valid[k] && (!causal || k <= q);
                    let max = (0..len)
                        .filter(|&k| allowed(k))
                        .map(|k| row[k])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut denom = 0.0;
                    for k in (0..len).filter(|&k| allowed(k)) {
                        let e = (row[k] - max).exp();
                        out[base + k] = e;
                        denom += e;
                    }
                    for k in (0..len).filter(|&k| allowed(k)) {
                        out[base + k] /= denom;
                    }
                }
            }
        }
        let v = Tensor::new(sv.shape().to_vec(), out, sv.precision())?;
        Ok(self.push(Op::MaskedSoftmax(scores), v, self.ng(&[scores])))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index(format!("row {i} outside {r}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(vec![rows.len(), c], data, xv.precision())?;
        Ok(self.push(Op::GatherRows(x, rows.to_vec()), v, self.ng(&[x])))
    }

    /// Picks `x[r, c]` for each pair into an `[n, 1]` column.
    pub fn gather_elems(&mut self, x: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= r || j >= c {
                return Err(Error::Index(format!("element ({i},{j}) outside {r}x{c}")));
            }
            data.push(xv.data()[i * c + j]);
        }
        let v = Tensor::new(vec![pairs.len(), 1], data, xv.precision())?;
        Ok(self.push(Op::GatherElems(x, pairs.to_vec()), v, self.ng(&[x])))
    }

    /// Multiplies row `i` of `x` by `s[i, 0]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let sv = self.value(s);
        let (r, c) = xv.dims2()?;
        if sv.shape() != [r, 1] {
            return dim_err(format!("row scales {:?} do not match {:?}", sv.shape(), xv.shape()));
        }
        let data = (0..r * c).map(|i| xv.data()[i] * sv.data()[i / c]).collect();
        let v = Tensor::new(vec![r, c], data, self.prec(&[x, s]))?;
        Ok(self.push(Op::ScaleRows(x, s), v, self.ng(&[x, s])))
    }

    /// Zero `[rows, cols]` output with each part's rows added at the given
    /// destinations, in part order.
    pub fn scatter_rows(&mut self, parts: Vec<(NodeId, Vec<usize>)>, rows: usize, cols: usize, precision: Precision) -> Result<NodeId> {
        let mut out = vec![0.0; rows * cols];
        for (node, dest) in &parts {
            let pv = self.value(*node);
            if pv.shape() != [dest.len(), cols] {
                return dim_err(format!("scatter part {:?} does not match {} rows of {cols}", pv.shape(), dest.len()));
            }
            for (i, &d) in dest.iter().enumerate() {
                if d >= rows {
                    return Err(Error::Index(format!("scatter row {d} outside {rows}")));
                }
                for (o, v) in out[d * cols..(d + 1) * cols].iter_mut().zip(pv.row(i)) {
                    *o += v;
                }
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.0).collect();
        let p = self.prec(&ids).join(precision);
        let p = if ids.is_empty() { precision } else { p };
        let v = Tensor::new(vec![rows, cols], out, p)?;
        let ng = self.ng(&ids);
        Ok(self.push(Op::ScatterRows(parts), v, ng))
    }

    /// Divides each row by its sum; all-zero rows stay zero.
    pub fn div_row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let v = Tensor::new(vec![r, c], data, xv.precision())?;
        Ok(self.push(Op::DivRowSum(x), v, self.ng(&[x])))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum(), xv.precision());
        self.push(Op::Sum(x), v, self.ng(&[x]))
    }

    /// Mean of the valid rows of each sequence: `[B*L, d] -> [B, d]`.
    pub fn masked_mean_pool(&mut self, x: NodeId, batch: usize, len: usize, valid: &[bool]) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if r != batch * len || valid.len() != r {
            return dim_err(format!("pool over {r} rows with batch {batch} x len {len}"));
        }
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            let count = valid[b * len..(b + 1) * len].iter().filter(|v| **v).count();
            if count == 0 {
                continue;
            }
            let o = &mut out[b * c..(b + 1) * c];
            for l in 0..len {
                if valid[b * len + l] {
                    for (acc, v) in o.iter_mut().zip(xv.row(b * len + l)) {
                        *acc += v;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v /= count as f64);
        }
        let v = Tensor::new(vec![batch, c], out, xv.precision())?;
        Ok(self.push(
            Op::MaskedMeanPool {
                x,
                batch,
                len,
                valid: valid.to_vec(),
            },
            v,
            self.ng(&[x]),
        ))
    }

    /// Mean cross-entropy of `[N, C]` logits against `N` labels, as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let loss = tensor::cross_entropy(lv, targets)?;
        let (_, c) = lv.dims2()?;
        let mut probs = Vec::with_capacity(lv.numel());
        for row in lv.data().chunks(c) {
            let lse = logsumexp(row);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let v = Tensor::scalar(loss, lv.precision());
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            v,
            ng,
        ))
    }

    /// Gradients of a scalar node with respect to every parameter leaf on the
    /// tape. Parameters the loss does not reach receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (&pid, &nid) in &self.params {
            let value = &self.nodes[nid.0].value;
            let g = match grads[nid.0].take() {
                Some(g) if nid.0 <= loss.0 => g,
                _ => vec![0.0; value.numel()],
            };
            out.insert(pid, Tensor::new(value.shape().to_vec(), g, Precision::Double)?);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shape = |id: NodeId| self.nodes[id.0].value.shape();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    self.acc(grads, id, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(u, v)| *u += v));
                let cols = shape(*b)[0];
                self.acc(grads, *b, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| tensor::matmul_nt_into(g, bv, ga, m, n, k));
                self.acc(grads, *b, |gb| tensor::matmul_tn_into(av, g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Activate(a, act) => {
                let av = val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        let d = match act {
                            Activation::Relu => {
                                if av[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Gelu => gelu_grad(av[i]),
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                self.acc(grads, *a, |ga| softmax_backward(y, g, ga, cols));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let cols = shape(*gain)[0];
                let (xv, gv) = (val(*x), val(*gain));
                let rows = mean.len();
                let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[r]) * rstd[r];
                self.acc(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gv[c];
                            gx[r * cols + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let cols = shape(*table)[1];
                self.acc(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[i * cols + c];
                        }
                    }
                });
            }
            Op::SplitHeads(x, layout) => {
                self.acc(grads, *x, |gx| layout.for_each(|flat, split| gx[flat] += g[split]));
            }
            Op::MergeHeads(x, layout) => {
                self.acc(grads, *x, |gx| layout.for_each(|flat, split| gx[split] += g[flat]));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (n, p, q) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let r = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        let gs = &g[i * p * r..(i + 1) * p * r];
                        let bs = &bv[i * q * r..(i + 1) * q * r];
                        let out = &mut ga[i * p * q..(i + 1) * p * q];
                        if *transpose_b {
                            // out = g[p,r] * b[r,q]
                            tensor::matmul_into(gs, bs, out, p, r, q);
                        } else {
                            // out = g[p,r] * b[q,r]^T
                            tensor::matmul_nt_into(gs, bs, out, p, r, q);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        let gs = &g[i * p * r..(i + 1) * p * r];
                        let as_ = &av[i * p * q..(i + 1) * p * q];
                        let out = &mut gb[i * q * r..(i + 1) * q * r];
                        if *transpose_b {
                            // out[r,q] = g[p,r]^T * a[p,q]
                            tensor::matmul_tn_into(gs, as_, out, p, r, q);
                        } else {
                            // out[q,r] = a[p,q]^T * g[p,r]
                            tensor::matmul_tn_into(as_, gs, out, p, q, r);
                        }
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let cols = shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gx[r * cols + c] += g[i * cols + c];
                        }
                    }
                });
            }
            Op::GatherElems(x, pairs) => {
                let cols = shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for (i, &(r, c)) in pairs.iter().enumerate() {
                        gx[r * cols + c] += g[i];
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let cols = shape(*x)[1];
                let (xv, sv) = (val(*x), val(*s));
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sv[i / cols];
                    }
                });
                self.acc(grads, *s, |gs| {
                    for (i, gsi) in gs.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g[i * cols + c] * xv[i * cols + c];
                        }
                        *gsi += acc;
                    }
                });
            }
            Op::ScatterRows(parts) => {
                let cols = node.value.shape()[1];
                for (part, dest) in parts {
                    self.acc(grads, *part, |gp| {
                        for (i, &d) in dest.iter().enumerate() {
                            for c in 0..cols {
                                gp[i * cols + c] += g[d * cols + c];
                            }
                        }
                    });
                }
            }
            Op::DivRowSum(x) => {
                let cols = shape(*x)[1];
                let xv = val(*x);
                self.acc(grads, *x, |gx| {
                    for (r, row) in xv.chunks(cols).enumerate() {
                        let s: f64 = row.iter().sum();
                        if s == 0.0 {
                            continue;
                        }
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += gr[c] / s - dot / (s * s);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::MaskedMeanPool {
                x,
                batch,
                len,
                valid,
            } => {
                let cols = shape(*x)[1];
                self.acc(grads, *x, |gx| {
                    for b in 0..*batch {
                        let count = valid[b * len..(b + 1) * len].iter().filter(|v| **v).count();
                        if count == 0 {
                            continue;
                        }
                        for l in 0..*len {
                            let row = b * len + l;
                            if valid[row] {
                                for c in 0..cols {
                                    gx[row * cols + c] += g[b * cols + c] / count as f64;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = shape(*logits)[1];
                let n = targets.len() as f64;
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * cols + c] += g[0] * (probs[r * cols + c] - onehot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn softmax_backward(y: &[f64], g: &[f64], gx: &mut [f64], cols: usize) {
    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            gx[r * cols + c] += yr[c] * (gr[c] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(n, s)| {
                let t = Tensor::from_fn(s.clone(), Precision::Double, |_| rng.random_range(-1.0..1.0));
                store.insert(*n, t).unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn sum_gives_ones() {
        let (store, ids) = random_store(&[("w", vec![2, 3])], 1);
        let mut g = Graph::new();
        let w = g.param(ids[0], &store);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ids[0]).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::from_vec(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let xn = g.param(x, &store);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let (store, ids) = random_store(&[("a", vec![2]), ("b", vec![3])], 2);
        let mut g = Graph::new();
        let a = g.param(ids[0], &store);
        let _b = g.param(ids[1], &store);
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ids[1]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, ids) = random_store(&[("a", vec![2])], 3);
        let mut g = Graph::new();
        let a = g.param(ids[0], &store);
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_and_matmul_ops_match_finite_differences() {
        let (store, ids) = random_store(
            &[("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5]), ("g", vec![5]), ("beta", vec![5])],
            4,
        );
        let build = |store: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let x = g.param(ids[0], store);
            let w = g.param(ids[1], store);
            let b = g.param(ids[2], store);
            let y = g.matmul(x, w)?;
            let y = g.add_bias(y, b)?;
            let gain = g.param(ids[3], store);
            let beta = g.param(ids[4], store);
            let y = g.layernorm(y, gain, beta)?;
            let y = g.activate(y, Activation::Gelu);
            let yt = g.transpose(y)?;
            let yt = g.scale(yt, 0.7);
            let s = g.softmax_rows(yt)?;
            let s2 = g.mul(s, s)?;
            let d = g.div_row_sum(s2)?;
            let loss = g.cross_entropy(d, &[1, 0, 2, 2, 1])?;
            Ok((g, loss))
        };
        let report = check_gradients(&store, 1e-5, 1e-8, |s| build(s)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_style_ops_match_finite_differences() {
        let layout = HeadLayout {
            batch: 2,
            len: 3,
            heads: 2,
            head_dim: 2,
        };
        let (store, ids) = random_store(&[("q", vec![6, 4]), ("k", vec![6, 4]), ("v", vec![6, 4]), ("e", vec![5, 4])], 5);
        let valid = vec![true, true, false, true, true, true];
        let build = |store: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let q = g.param(ids[0], store);
            let k = g.param(ids[1], store);
            let v = g.param(ids[2], store);
            let qh = g.split_heads(q, layout)?;
            let kh = g.split_heads(k, layout)?;
            let vh = g.split_heads(v, layout)?;
            let sc = g.batch_matmul(qh, kh, true)?;
            let w = g.masked_softmax(sc, 2, 2, &valid, true)?;
            let ctx = g.batch_matmul(w, vh, false)?;
            let m = g.merge_heads(ctx, layout)?;
            let table = g.param(ids[3], store);
            let emb = g.embedding(table, &[4, 0, 4, 1, 2, 3])?;
            let m = g.add(m, emb)?;
            let picked = g.gather_rows(m, &[5, 0, 3])?;
            let gates = g.gather_elems(m, &[(1, 2), (4, 0), (0, 3)])?;
            let scaled = g.scale_rows(picked, gates)?;
            let sc = g.scatter_rows(vec![(scaled, vec![1, 0, 1])], 2, 4, Precision::Double)?;
            let pooled = g.masked_mean_pool(m, 2, 3, &valid)?;
            let tot = g.add(sc, pooled)?;
            let sq = g.mul(tot, tot)?;
            let loss = g.sum(sq);
            Ok((g, loss))
        };
        let report = check_gradients(&store, 1e-5, 1e-8, |s| build(s)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn masked_keys_have_zero_weight() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![5.0, -3.0, 0.2, 0.1]).unwrap());
        let w = g.masked_softmax(s, 1, 1, &[true, false], false).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}

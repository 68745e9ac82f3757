//! Static computation graphs with forward evaluation and reverse-mode
//! differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; inputs always refer to
//! earlier nodes, so node order is a topological order. Parameters are bound
//! by name and resolved against a [`ParamStore`] at evaluation time.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::dense::gemm;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Named feed of input tensors.
pub type Inputs = BTreeMap<String, Tensor>;

/// A contiguous block of query rows attending to a contiguous block of key rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone)]
pub enum Op {
    Param(String),
    Input { name: String, shape: Option<Vec<usize>> },
    Const(Tensor),
    /// `[m,k] x [k,n]`, or `[m,k] x [n,k]^T` when `trans_b`.
    MatMul { trans_b: bool },
    Add,
    /// Broadcast a `[n]` vector over the rows of a `[.., n]` tensor.
    AddRow,
    Mul,
    Scale(f64),
    Sum,
    /// Softmax over the last axis.
    Softmax,
    /// Inputs: `x`, gain, bias. Normalizes over the last axis.
    LayerNorm { eps: f64 },
    /// Inputs: table `[V,d]`, ids `[n]`.
    Embedding,
    Relu,
    Reshape(Vec<usize>),
    ConcatCols,
    SliceCols { start: usize, len: usize },
    /// Multi-head scaled dot-product attention over packed sequences.
    /// Inputs: q `[Nq,d]`, k `[Nk,d]`, v `[Nk,d]`.
    Attention {
        heads: usize,
        causal: bool,
        segments: Arc<[Segment]>,
    },
    /// Mean token negative log-likelihood. Inputs: logits `[n,V]`, targets `[n]`.
    CrossEntropy { label_smoothing: f64 },
    /// Mean over rows of KL(q || softmax(logits)). Inputs: logits `[n,V]`, q `[n,V]`.
    KlDivergence,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding => "embedding",
            Op::Relu => "relu",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols => "concat",
            Op::SliceCols { .. } => "slice",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDivergence => "kl_divergence",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: String,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Output of every node from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn take(mut self, node: NodeId) -> Tensor {
        self.values.swap_remove(node)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        let name = format!("{}#{id}", op.kind());
        self.nodes.push(Node { op, inputs, name });
        id
    }

    /// Rename a node; names appear in error messages.
    pub fn named(&mut self, node: NodeId, name: impl Into<String>) -> NodeId {
        self.nodes[node].name = name.into();
        node
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let id = self.push(Op::Param(name.to_string()), vec![]);
        self.named(id, name)
    }

    pub fn input(&mut self, name: &str, shape: Option<Vec<usize>>) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                shape,
            },
            vec![],
        );
        self.named(id, name)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { trans_b: false }, vec![a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { trans_b: true }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow, vec![x, bias])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x, gain, bias])
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Embedding, vec![table, ids])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(shape), vec![x])
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols, xs.to_vec())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { start, len }, vec![x])
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        segments: Arc<[Segment]>,
    ) -> NodeId {
        self.push(
            Op::Attention {
                heads,
                causal,
                segments,
            },
            vec![q, k, v],
        )
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId, label_smoothing: f64) -> NodeId {
        self.push(Op::CrossEntropy { label_smoothing }, vec![logits, targets])
    }

    pub fn kl_divergence(&mut self, logits: NodeId, teacher_probs: NodeId) -> NodeId {
        self.push(Op::KlDivergence, vec![logits, teacher_probs])
    }

    /// Names of all parameters the graph reads.
    pub fn bound_params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(p) => Some(p.as_str()),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Evaluate every node.
    pub fn forward(&self, params: &ParamStore, inputs: &Inputs) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = eval_node(node, &values, params, inputs)?;
            if !out.is_finite() {
                return Err(Error::NumericOverflow {
                    node: node.name.clone(),
                });
            }
            values.push(out);
        }
        Ok(Values { values })
    }

    /// Evaluate and return only the requested node outputs.
    pub fn forward_outputs(
        &self,
        params: &ParamStore,
        inputs: &Inputs,
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let values = self.forward(params, inputs)?;
        Ok(outputs.iter().map(|&o| values.get(o).clone()).collect())
    }

    /// Gradient of a scalar node with respect to every parameter in `params`.
    /// Parameters the graph never reads get zero gradients.
    pub fn backward(&self, params: &ParamStore, inputs: &Inputs, loss: NodeId) -> Result<ParamStore> {
        self.forward_backward(params, inputs, loss).map(|(_, g)| g)
    }

    pub fn forward_backward(
        &self,
        params: &ParamStore,
        inputs: &Inputs,
        loss: NodeId,
    ) -> Result<(Values, ParamStore)> {
        if loss >= self.nodes.len() {
            return Err(Error::contract(format!("loss node {loss} does not exist")));
        }
        let values = self.forward(params, inputs)?;
        if values.get(loss).len() != 1 {
            return Err(Error::contract(format!(
                "loss node `{}` is not scalar (shape {:?})",
                self.nodes[loss].name,
                values.get(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        let mut param_grads = params.zeros_like();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(name) => {
                    let t = param_grads.get_mut(name).expect("resolved during forward");
                    for (a, b) in t.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Input { .. } | Op::Const(_) => {}
                _ => {
                    let input_grads = backward_node(id, node, &values.values, &g)?;
                    for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match &mut grads[inp] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a += b;
                                }
                            }
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok((values, param_grads))
    }
}

fn rank2(t: &Tensor, node: &Node, which: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            &node.name,
            format!("{which} must be rank 2, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn token_ids(t: &Tensor, vocab: usize, node: &Node) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab {
                Ok(v as usize)
            } else {
                Err(Error::contract(format!(
                    "`{}`: token id {v} outside vocabulary of {vocab}",
                    node.name
                )))
            }
        })
        .collect()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `log softmax` of one row.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn validate_segments(
    node: &Node,
    segments: &[Segment],
    nq: usize,
    nk: usize,
    causal: bool,
) -> Result<()> {
    let mut next_q = 0;
    for s in segments {
        if s.q_start != next_q || s.q_len == 0 || s.k_len == 0 || s.k_start + s.k_len > nk {
            return Err(Error::shape(
                &node.name,
                format!("attention segment {s:?} inconsistent with {nq} queries / {nk} keys"),
            ));
        }
        if causal && s.q_len != s.k_len {
            return Err(Error::shape(&node.name, "causal segment needs equal query and key lengths"));
        }
        next_q += s.q_len;
    }
    if next_q != nq {
        return Err(Error::shape(
            &node.name,
            format!("attention segments cover {next_q} of {nq} query rows"),
        ));
    }
    Ok(())
}

/// Attention probabilities for one (segment, head): `[q_len, k_len]` row-major.
fn attention_probs(
    q: &[f64],
    k: &[f64],
    d: usize,
    dh: usize,
    h: usize,
    s: &Segment,
    causal: bool,
) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; s.q_len * s.k_len];
    let mut row = vec![0.0; s.k_len];
    for i in 0..s.q_len {
        let qi = &q[(s.q_start + i) * d + h * dh..][..dh];
        let visible = if causal { i + 1 } else { s.k_len };
        for (j, r) in row.iter_mut().enumerate().take(visible) {
            let kj = &k[(s.k_start + j) * d + h * dh..][..dh];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_row(&row[..visible], &mut p[i * s.k_len..i * s.k_len + visible]);
    }
    p
}

fn eval_node(node: &Node, values: &[Tensor], params: &ParamStore, inputs: &Inputs) -> Result<Tensor> {
    let arg = |i: usize| &values[node.inputs[i]];
    let out = match &node.op {
        Op::Param(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("graph binds unknown parameter `{name}`")))?,
        Op::Input { name, shape } => {
            let t = inputs
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing graph input `{name}`")))?;
            if let Some(shape) = shape {
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        &node.name,
                        format!("input declared {shape:?}, fed {:?}", t.shape()),
                    ));
                }
            }
            t.clone()
        }
        Op::Const(t) => t.clone(),
        Op::MatMul { trans_b } => {
            let (a, b) = (arg(0), arg(1));
            let (m, k) = rank2(a, node, "lhs")?;
            let (br, bc) = rank2(b, node, "rhs")?;
            let (kb, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(Error::shape(
                    &node.name,
                    format!("matmul {:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()),
                ));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), *trans_b, &mut c, false);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Add | Op::Mul => {
            let (a, b) = (arg(0), arg(1));
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    &node.name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = if matches!(node.op, Op::Add) {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::AddRow => {
            let (x, b) = (arg(0), arg(1));
            let (_, cols) = x.as_matrix_dims();
            if b.len() != cols {
                return Err(Error::shape(
                    &node.name,
                    format!("bias {:?} vs input {:?}", b.shape(), x.shape()),
                ));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Scale(c) => arg(0).map(|v| v * c),
        Op::Sum => Tensor::scalar(arg(0).data().iter().sum()),
        Op::Softmax => {
            let x = arg(0);
            let (_, cols) = x.as_matrix_dims();
            let mut data = vec![0.0; x.len()];
            for (row, out) in x.data().chunks(cols).zip(data.chunks_mut(cols)) {
                softmax_row(row, out);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::LayerNorm { eps } => {
            let (x, g, b) = (arg(0), arg(1), arg(2));
            let (_, cols) = x.as_matrix_dims();
            if g.len() != cols || b.len() != cols {
                return Err(Error::shape(
                    &node.name,
                    format!("gain {:?} / bias {:?} vs input {:?}", g.shape(), b.shape(), x.shape()),
                ));
            }
            let mut data = vec![0.0; x.len()];
            for (row, out) in x.data().chunks(cols).zip(data.chunks_mut(cols)) {
                let (mean, inv) = row_stats(row, *eps);
                for j in 0..cols {
                    out[j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Embedding => {
            let (table, ids) = (arg(0), arg(1));
            let (vocab, d) = rank2(table, node, "embedding table")?;
            let ids = token_ids(ids, vocab, node)?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in &ids {
                data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        }
        Op::Relu => arg(0).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Reshape(shape) => arg(0)
            .clone()
            .reshaped(shape.clone())
            .map_err(|e| Error::shape(&node.name, e.to_string()))?,
        Op::ConcatCols => {
            let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
            let mut rows = None;
            let mut widths = Vec::with_capacity(parts.len());
            for p in &parts {
                let (r, c) = rank2(p, node, "concat operand")?;
                if *rows.get_or_insert(r) != r {
                    return Err(Error::shape(&node.name, "concat operands differ in row count"));
                }
                widths.push(c);
            }
            let rows = rows.unwrap_or(0);
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        }
        Op::SliceCols { start, len } => {
            let x = arg(0);
            let (rows, cols) = rank2(x, node, "slice operand")?;
            if start + len > cols || *len == 0 {
                return Err(Error::shape(
                    &node.name,
                    format!("slice {start}..{} of {cols} columns", start + len),
                ));
            }
            let mut data = Vec::with_capacity(rows * len);
            for row in x.data().chunks(cols) {
                data.extend_from_slice(&row[*start..start + len]);
            }
            Tensor::from_parts(vec![rows, *len], data)
        }
        Op::Attention {
            heads,
            causal,
            segments,
        } => {
            let (q, k, v) = (arg(0), arg(1), arg(2));
            let (nq, d) = rank2(q, node, "queries")?;
            let (nk, dk) = rank2(k, node, "keys")?;
            let (nv, dv) = rank2(v, node, "values")?;
            if dk != d || dv != d || nv != nk || *heads == 0 || d % heads != 0 {
                return Err(Error::shape(
                    &node.name,
                    format!("q {:?} k {:?} v {:?} heads {heads}", q.shape(), k.shape(), v.shape()),
                ));
            }
            validate_segments(node, segments, nq, nk, *causal)?;
            let dh = d / heads;
            let mut out = vec![0.0; nq * d];
            for s in segments.iter() {
                for h in 0..*heads {
                    let p = attention_probs(q.data(), k.data(), d, dh, h, s, *causal);
                    for i in 0..s.q_len {
                        let o = &mut out[(s.q_start + i) * d + h * dh..][..dh];
                        for j in 0..s.k_len {
                            let pij = p[i * s.k_len + j];
                            if pij == 0.0 {
                                continue;
                            }
                            let vj = &v.data()[(s.k_start + j) * d + h * dh..][..dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += pij * vv;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![nq, d], out)
        }
        Op::CrossEntropy { label_smoothing } => {
            let (logits, targets) = (arg(0), arg(1));
            let (n, vocab) = rank2(logits, node, "logits")?;
            if targets.len() != n {
                return Err(Error::shape(
                    &node.name,
                    format!("{n} logit rows vs {} targets", targets.len()),
                ));
            }
            let t = token_ids(targets, vocab, node)?;
            let mut lp = vec![0.0; vocab];
            let mut total = 0.0;
            for (row, &ti) in logits.data().chunks(vocab).zip(&t) {
                log_softmax_row(row, &mut lp);
                let mut l = -(1.0 - label_smoothing) * lp[ti];
                if *label_smoothing > 0.0 {
                    l -= label_smoothing / vocab as f64 * lp.iter().sum::<f64>();
                }
                total += l;
            }
            Tensor::scalar(total / n as f64)
        }
        Op::KlDivergence => {
            let (logits, q) = (arg(0), arg(1));
            let (n, vocab) = rank2(logits, node, "logits")?;
            if q.shape() != logits.shape() {
                return Err(Error::shape(
                    &node.name,
                    format!("teacher {:?} vs logits {:?}", q.shape(), logits.shape()),
                ));
            }
            let mut lp = vec![0.0; vocab];
            let mut total = 0.0;
            for (row, qrow) in logits.data().chunks(vocab).zip(q.data().chunks(vocab)) {
                log_softmax_row(row, &mut lp);
                for (&qj, &lpj) in qrow.iter().zip(&lp) {
                    if qj > 0.0 {
                        total += qj * (qj.ln() - lpj);
                    }
                }
            }
            Tensor::scalar(total / n as f64)
        }
    };
    Ok(out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Gradients for each input of `node` given the gradient `g` of its output.
fn backward_node(id: NodeId, node: &Node, values: &[Tensor], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let arg = |i: usize| &values[node.inputs[i]];
    let grads = match &node.op {
        Op::Param(_) | Op::Input { .. } | Op::Const(_) => vec![],
        Op::MatMul { trans_b } => {
            let (a, b) = (arg(0), arg(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = g.len() / m;
            let mut da = vec![0.0; m * k];
            // dA = dC * B^T, with B stored [k,n] (or [n,k] when trans_b).
            gemm(m, n, k, g, false, b.data(), !*trans_b, &mut da, false);
            let mut db = vec![0.0; k * n];
            if *trans_b {
                // stored [n,k]: dB = dC^T * A
                gemm(n, m, k, g, true, a.data(), false, &mut db, false);
            } else {
                gemm(k, m, n, a.data(), true, g, false, &mut db, false);
            }
            vec![Some(da), Some(db)]
        }
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::AddRow => {
            let cols = arg(1).len();
            let mut db = vec![0.0; cols];
            for row in g.chunks(cols) {
                for (d, x) in db.iter_mut().zip(row) {
                    *d += x;
                }
            }
            vec![Some(g.to_vec()), Some(db)]
        }
        Op::Mul => {
            let (a, b) = (arg(0), arg(1));
            let da = g.iter().zip(b.data()).map(|(x, y)| x * y).collect();
            let db = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
            vec![Some(da), Some(db)]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|x| x * c).collect())],
        Op::Sum => vec![Some(vec![g[0]; arg(0).len()])],
        Op::Softmax => {
            let y = &values[id];
            let (_, cols) = y.as_matrix_dims();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.data().chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { eps } => {
            let (x, gain) = (arg(0), arg(1));
            let (_, cols) = x.as_matrix_dims();
            let n = cols as f64;
            let mut dx = vec![0.0; x.len()];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            let mut xhat = vec![0.0; cols];
            let mut dxhat = vec![0.0; cols];
            for ((row, gr), dr) in x.data().chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                let (mean, inv) = row_stats(row, *eps);
                for j in 0..cols {
                    xhat[j] = (row[j] - mean) * inv;
                    dxhat[j] = gr[j] * gain.data()[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dr[j] = inv / n * (n * dxhat[j] - s1 - xhat[j] * s2);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }
        Op::Embedding => {
            let (table, ids) = (arg(0), arg(1));
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.len()];
            for (r, &id) in ids.data().iter().enumerate() {
                let i = id as usize;
                for (a, b) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *a += b;
                }
            }
            vec![Some(dt), None]
        }
        Op::Relu => {
            let x = arg(0);
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(&gg, &xx)| if xx > 0.0 { gg } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::ConcatCols => {
            let widths: Vec<usize> = node.inputs.iter().map(|&i| values[i].shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for row in g.chunks(total) {
                let mut off = 0;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            outs.into_iter().map(Some).collect()
        }
        Op::SliceCols { start, len } => {
            let x = arg(0);
            let cols = x.shape()[1];
            let mut dx = vec![0.0; x.len()];
            for (dr, gr) in dx.chunks_mut(cols).zip(g.chunks(*len)) {
                dr[*start..start + len].copy_from_slice(gr);
            }
            vec![Some(dx)]
        }
        Op::Attention {
            heads,
            causal,
            segments,
        } => {
            let (q, k, v) = (arg(0), arg(1), arg(2));
            let d = q.shape()[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; q.len()];
            let mut dk = vec![0.0; k.len()];
            let mut dv = vec![0.0; v.len()];
            for s in segments.iter() {
                for h in 0..*heads {
                    let p = attention_probs(q.data(), k.data(), d, dh, h, s, *causal);
                    let mut dp = vec![0.0; s.k_len];
                    for i in 0..s.q_len {
                        let gi = &g[(s.q_start + i) * d + h * dh..][..dh];
                        let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                        let visible = if *causal { i + 1 } else { s.k_len };
                        // dP and dV
                        for j in 0..visible {
                            let vrow = (s.k_start + j) * d + h * dh;
                            dp[j] = gi.iter().zip(&v.data()[vrow..vrow + dh]).map(|(a, b)| a * b).sum();
                            for (dvv, gg) in dv[vrow..vrow + dh].iter_mut().zip(gi) {
                                *dvv += prow[j] * gg;
                            }
                        }
                        let dot: f64 = (0..visible).map(|j| prow[j] * dp[j]).sum();
                        let qrow = (s.q_start + i) * d + h * dh;
                        for j in 0..visible {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = (s.k_start + j) * d + h * dh;
                            for c in 0..dh {
                                dq[qrow + c] += ds * k.data()[krow + c];
                                dk[krow + c] += ds * q.data()[qrow + c];
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        }
        Op::CrossEntropy { label_smoothing } => {
            let logits = arg(0);
            let targets = arg(1);
            let vocab = logits.shape()[1];
            let n = logits.shape()[0];
            let mut dl = vec![0.0; logits.len()];
            let smooth = label_smoothing / vocab as f64;
            for ((row, dr), &t) in logits
                .data()
                .chunks(vocab)
                .zip(dl.chunks_mut(vocab))
                .zip(targets.data())
            {
                softmax_row(row, dr);
                for x in dr.iter_mut() {
                    *x -= smooth;
                }
                dr[t as usize] -= 1.0 - label_smoothing;
                for x in dr.iter_mut() {
                    *x *= g[0] / n as f64;
                }
            }
            vec![Some(dl), None]
        }
        Op::KlDivergence => {
            let (logits, q) = (arg(0), arg(1));
            let vocab = logits.shape()[1];
            let n = logits.shape()[0];
            let mut dl = vec![0.0; logits.len()];
            for ((row, qrow), dr) in logits
                .data()
                .chunks(vocab)
                .zip(q.data().chunks(vocab))
                .zip(dl.chunks_mut(vocab))
            {
                softmax_row(row, dr);
                let qsum: f64 = qrow.iter().sum();
                for (x, &qj) in dr.iter_mut().zip(qrow) {
                    *x = (*x * qsum - qj) * g[0] / n as f64;
                }
            }
            vec![Some(dl), None]
        }
    };
    Ok(grads)
}

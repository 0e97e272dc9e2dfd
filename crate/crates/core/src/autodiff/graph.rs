//! Dynamic computation graph with reverse-mode backward.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once. Broadcasting is limited to trailing
//! dimensions (the rhs shape must be a suffix of the lhs shape).

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Matmul,
    Bmm,
    Transpose,
    Relu,
    Gelu,
    LayerNorm { eps: f64 },
    SoftmaxLast,
    LogSumExpLast,
    SumLast,
    SumAll,
    MeanAll,
    Mse,
    Reshape { from: Vec<usize> },
    ExpandAxis1 { n: usize },
    ExpandRows { n: usize },
    ConcatAxis1 { split: usize },
    ConcatLast { split: usize },
    SliceAxis1 { start: usize, end: usize, from_t: usize },
    SplitHeads { h: usize },
    MergeHeads { h: usize },
    RowNormalize { norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Per-backward-pass gradient table, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, NodeId)>,
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
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = matches!(op, Op::Param)
            || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Constant input; gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Bind a store entry. Trainable entries participate in backward;
    /// frozen entries are inserted as plain constants so no gradient buffer
    /// ever exists for them. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return node;
        }
        let value = store.get(id).clone();
        if store.is_trainable(id) {
            let node = self.push(Op::Param, vec![], value);
            self.bindings.push((id, node));
            node
        } else {
            self.push(Op::Leaf, vec![], value)
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::ew_add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::ew_sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::ew_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], v))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::bmm(self.value(a), self.value(b))?;
        Ok(self.push(Op::Bmm, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose, vec![a], v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: xv.shape().to_vec(),
            rhs: vec![],
        })?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(gain).shape().to_vec(),
                rhs: vec![d],
            });
        }
        let rows = xv.numel() / d;
        let mut out = vec![0.0; xv.numel()];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out);
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], v))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = tensor::softmax_last(self.value(a));
        self.push(Op::SoftmaxLast, vec![a], v)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = tensor::log_sum_exp_last(self.value(a));
        self.push(Op::LogSumExpLast, vec![a], v)
    }

    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sum_last(self.value(a));
        self.push(Op::SumLast, vec![a], v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(Op::MeanAll, vec![a], v)
    }

    /// Mean squared error between two same-shaped tensors (scalar output).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = av.numel() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse, vec![a, b], Tensor::scalar(s / n)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let from = self.value(a).shape().to_vec();
        let v = self.value(a).reshaped(shape);
        self.push(Op::Reshape { from }, vec![a], v)
    }

    /// (B,1,M) -> (B,n,M) by repetition along axis 1.
    pub fn expand_axis1(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 3 || av.shape()[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_axis1",
                lhs: av.shape().to_vec(),
                rhs: vec![0, 1, 0],
            });
        }
        let (b, m) = (av.shape()[0], av.shape()[2]);
        let mut out = Vec::with_capacity(b * n * m);
        for bi in 0..b {
            let src = &av.data()[bi * m..(bi + 1) * m];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let v = Tensor::new(vec![b, n, m], out);
        Ok(self.push(Op::ExpandAxis1 { n }, vec![a], v))
    }

    /// (1,M) -> (n,M) by row repetition.
    pub fn expand_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 || av.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![1, 0],
            });
        }
        let m = av.shape()[1];
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(av.data());
        }
        let v = Tensor::new(vec![n, m], out);
        Ok(self.push(Op::ExpandRows { n }, vec![a], v))
    }

    /// Concatenate two 3-D tensors along axis 1 (tokens).
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 3
            || bv.ndim() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[2]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_axis1",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (bs, t1, m) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let t2 = bv.shape()[1];
        let mut out = Vec::with_capacity(bs * (t1 + t2) * m);
        for bi in 0..bs {
            out.extend_from_slice(&av.data()[bi * t1 * m..(bi + 1) * t1 * m]);
            out.extend_from_slice(&bv.data()[bi * t2 * m..(bi + 1) * t2 * m]);
        }
        let v = Tensor::new(vec![bs, t1 + t2, m], out);
        Ok(self.push(Op::ConcatAxis1 { split: t1 }, vec![a, b], v))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (la, lb) = (av.ndim(), bv.ndim());
        if la == 0
            || la != lb
            || av.shape()[..la - 1] != bv.shape()[..lb - 1]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n1 = av.shape()[la - 1];
        let n2 = bv.shape()[lb - 1];
        let rows = av.numel() / n1;
        let mut out = Vec::with_capacity(rows * (n1 + n2));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * n1..(r + 1) * n1]);
            out.extend_from_slice(&bv.data()[r * n2..(r + 1) * n2]);
        }
        let mut shape = av.shape().to_vec();
        shape[la - 1] = n1 + n2;
        let v = Tensor::new(shape, out);
        Ok(self.push(Op::ConcatLast { split: n1 }, vec![a, b], v))
    }

    /// Slice tokens [start, end) along axis 1 of a 3-D tensor.
    pub fn slice_axis1(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 3 || end > av.shape()[1] || start >= end {
            return Err(Error::ShapeMismatch {
                op: "slice_axis1",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let (bs, t, m) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = Vec::with_capacity(bs * (end - start) * m);
        for bi in 0..bs {
            let base = bi * t * m;
            out.extend_from_slice(&av.data()[base + start * m..base + end * m]);
        }
        let v = Tensor::new(vec![bs, end - start, m], out);
        Ok(self.push(
            Op::SliceAxis1 {
                start,
                end,
                from_t: t,
            },
            vec![a],
            v,
        ))
    }

    /// (B,T,D) -> (B*h,T,D/h): split the channel axis into heads.
    pub fn split_heads(&mut self, a: NodeId, h: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 3 || av.shape()[2] % h != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                lhs: av.shape().to_vec(),
                rhs: vec![h],
            });
        }
        let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let hd = d / h;
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for q in 0..h {
                for ti in 0..t {
                    let src = bi * t * d + ti * d + q * hd;
                    let dst = (bi * h + q) * t * hd + ti * hd;
                    out[dst..dst + hd].copy_from_slice(&av.data()[src..src + hd]);
                }
            }
        }
        let v = Tensor::new(vec![b * h, t, hd], out);
        Ok(self.push(Op::SplitHeads { h }, vec![a], v))
    }

    /// (B*h,T,D/h) -> (B,T,D): inverse of `split_heads`.
    pub fn merge_heads(&mut self, a: NodeId, h: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 3 || av.shape()[0] % h != 0 {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                lhs: av.shape().to_vec(),
                rhs: vec![h],
            });
        }
        let (bh, t, hd) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let b = bh / h;
        let d = hd * h;
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for q in 0..h {
                for ti in 0..t {
                    let src = (bi * h + q) * t * hd + ti * hd;
                    let dst = bi * t * d + ti * d + q * hd;
                    out[dst..dst + hd].copy_from_slice(&av.data()[src..src + hd]);
                }
            }
        }
        let v = Tensor::new(vec![b, t, d], out);
        Ok(self.push(Op::MergeHeads { h }, vec![a], v))
    }

    /// Scale each row of a 2-D tensor to unit L2 norm.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_normalize",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, norms) = tensor::row_normalize(av);
        Ok(self.push(Op::RowNormalize { norms }, vec![a], v))
    }

    /// Reverse sweep from a scalar loss node. Each node is visited once in
    /// reverse creation order; constants and frozen parameters are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::GraphCycle(id));
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let contribs = self.input_grads(id, &g)?;
            for (input, contrib) in contribs {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            // Keep only gradients of parameter nodes alive.
            if matches!(self.nodes[id].op, Op::Param) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients for every bound trainable parameter; parameters bound but
    /// not reached by the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        self.bindings
            .iter()
            .map(|&(pid, node)| {
                let g = grads
                    .node_grad(node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape()));
                (pid, g)
            })
            .collect()
    }

    pub fn bindings(&self) -> &[(ParamId, NodeId)] {
        &self.bindings
    }

    fn input_grads(&self, id: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| self.value(ins[i]);
        let out = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Add => {
                let mut v = vec![(ins[0], g.clone())];
                let bshape = val(1).shape();
                if bshape == g.shape() {
                    v.push((ins[1], g.clone()));
                } else {
                    v.push((ins[1], tensor::reduce_to_suffix(g, bshape)));
                }
                v
            }
            Op::Sub => vec![(ins[0], g.clone()), (ins[1], g.map(|x| -x))],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() == b.shape() {
                    vec![
                        (ins[0], tensor::ew_mul(g, b)?),
                        (ins[1], tensor::ew_mul(g, a)?),
                    ]
                } else {
                    let da = tensor::ew_mul(g, b)?; // trailing broadcast
                    let gb_full = tensor::ew_mul(g, a).or_else(|_| tensor::ew_mul(a, g))?;
                    let db = tensor::reduce_to_suffix(&gb_full, b.shape());
                    vec![(ins[0], da), (ins[1], db)]
                }
            }
            Op::Scale(c) => vec![(ins[0], g.map(|x| x * c))],
            Op::AddScalar => vec![(ins[0], g.clone())],
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let g2 = if a.ndim() == 3 {
                    g.reshaped(vec![a.shape()[0] * a.shape()[1], b.shape()[1]])
                } else {
                    g.clone()
                };
                let bt = tensor::transpose(b)?;
                let da = tensor::matmul(&g2, &bt)?.reshaped(a.shape().to_vec());
                let a2 = if a.ndim() == 3 {
                    a.reshaped(vec![a.shape()[0] * a.shape()[1], a.shape()[2]])
                } else {
                    a.clone()
                };
                let at = tensor::transpose(&a2)?;
                let db = tensor::matmul(&at, &g2)?;
                vec![(ins[0], da), (ins[1], db)]
            }
            Op::Bmm => {
                let (a, b) = (val(0), val(1));
                let bt = tensor::transpose(b)?;
                let da = tensor::bmm(g, &bt)?;
                let at = tensor::transpose(a)?;
                let db = tensor::bmm(&at, g)?;
                vec![(ins[0], da), (ins[1], db)]
            }
            Op::Transpose => vec![(ins[0], tensor::transpose(g)?)],
            Op::Relu => {
                let x = val(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                    .collect();
                vec![(ins[0], Tensor::new(x.shape().to_vec(), data))]
            }
            Op::Gelu => {
                let x = val(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| gg * tensor::gelu_prime(x))
                    .collect();
                vec![(ins[0], Tensor::new(x.shape().to_vec(), data))]
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (val(0), val(1));
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let gn = gain.data();
                let mut dx = vec![0.0; x.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv).collect();
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for j in 0..d {
                        let dxh = grow[j] * gn[j];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gn[j];
                        dx[r * d + j] = inv * (dxh - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)),
                    (ins[1], Tensor::new(vec![d], dgain)),
                    (ins[2], Tensor::new(vec![d], dbias)),
                ]
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let rows = y.numel() / d;
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(ins[0], Tensor::new(y.shape().to_vec(), dx))]
            }
            Op::LogSumExpLast => {
                let x = val(0);
                let sm = tensor::softmax_last(x);
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let gr = g.data()[r];
                    for j in 0..d {
                        dx[r * d + j] = sm.data()[r * d + j] * gr;
                    }
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx))]
            }
            Op::SumLast => {
                let x = val(0);
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let gr = g.data()[r];
                    for j in 0..d {
                        dx[r * d + j] = gr;
                    }
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx))]
            }
            Op::SumAll => {
                let x = val(0);
                let gg = g.item();
                vec![(ins[0], Tensor::full(x.shape(), gg))]
            }
            Op::MeanAll => {
                let x = val(0);
                let gg = g.item() / x.numel() as f64;
                vec![(ins[0], Tensor::full(x.shape(), gg))]
            }
            Op::Mse => {
                let (a, b) = (val(0), val(1));
                let n = a.numel() as f64;
                let gg = g.item();
                let da: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| 2.0 * (x - y) * gg / n)
                    .collect();
                let db: Vec<f64> = da.iter().map(|x| -x).collect();
                vec![
                    (ins[0], Tensor::new(a.shape().to_vec(), da)),
                    (ins[1], Tensor::new(b.shape().to_vec(), db)),
                ]
            }
            Op::Reshape { from } => vec![(ins[0], g.reshaped(from.clone()))],
            Op::ExpandAxis1 { n } => {
                let x = val(0);
                let (b, m) = (x.shape()[0], x.shape()[2]);
                let mut dx = vec![0.0; b * m];
                for bi in 0..b {
                    for r in 0..*n {
                        let src = &g.data()[(bi * n + r) * m..(bi * n + r + 1) * m];
                        for (o, s) in dx[bi * m..(bi + 1) * m].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                vec![(ins[0], Tensor::new(vec![b, 1, m], dx))]
            }
            Op::ExpandRows { n } => {
                let m = val(0).shape()[1];
                let mut dx = vec![0.0; m];
                for r in 0..*n {
                    for (o, s) in dx.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *o += s;
                    }
                }
                vec![(ins[0], Tensor::new(vec![1, m], dx))]
            }
            Op::ConcatAxis1 { split } => {
                let (a, b) = (val(0), val(1));
                let (bs, t1, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let t2 = b.shape()[1];
                debug_assert_eq!(t1, *split);
                let t = t1 + t2;
                let mut da = vec![0.0; bs * t1 * m];
                let mut db = vec![0.0; bs * t2 * m];
                for bi in 0..bs {
                    let base = bi * t * m;
                    da[bi * t1 * m..(bi + 1) * t1 * m]
                        .copy_from_slice(&g.data()[base..base + t1 * m]);
                    db[bi * t2 * m..(bi + 1) * t2 * m]
                        .copy_from_slice(&g.data()[base + t1 * m..base + t * m]);
                }
                vec![
                    (ins[0], Tensor::new(a.shape().to_vec(), da)),
                    (ins[1], Tensor::new(b.shape().to_vec(), db)),
                ]
            }
            Op::ConcatLast { split } => {
                let (a, b) = (val(0), val(1));
                let n1 = *split;
                let n2 = b.shape()[b.ndim() - 1];
                let rows = a.numel() / n1;
                let mut da = vec![0.0; a.numel()];
                let mut db = vec![0.0; b.numel()];
                for r in 0..rows {
                    let base = r * (n1 + n2);
                    da[r * n1..(r + 1) * n1].copy_from_slice(&g.data()[base..base + n1]);
                    db[r * n2..(r + 1) * n2]
                        .copy_from_slice(&g.data()[base + n1..base + n1 + n2]);
                }
                vec![
                    (ins[0], Tensor::new(a.shape().to_vec(), da)),
                    (ins[1], Tensor::new(b.shape().to_vec(), db)),
                ]
            }
            Op::SliceAxis1 { start, end, from_t } => {
                let x = val(0);
                let (bs, m) = (x.shape()[0], x.shape()[2]);
                let span = end - start;
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..bs {
                    let dst = bi * from_t * m + start * m;
                    let src = bi * span * m;
                    dx[dst..dst + span * m].copy_from_slice(&g.data()[src..src + span * m]);
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx))]
            }
            Op::SplitHeads { h } => {
                let x = val(0);
                let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hd = d / h;
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for q in 0..*h {
                        for ti in 0..t {
                            let src = (bi * h + q) * t * hd + ti * hd;
                            let dst = bi * t * d + ti * d + q * hd;
                            dx[dst..dst + hd].copy_from_slice(&g.data()[src..src + hd]);
                        }
                    }
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx))]
            }
            Op::MergeHeads { h } => {
                let x = val(0);
                let (bh, t, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let b = bh / h;
                let d = hd * h;
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for q in 0..*h {
                        for ti in 0..t {
                            let src = bi * t * d + ti * d + q * hd;
                            let dst = (bi * h + q) * t * hd + ti * hd;
                            dx[dst..dst + hd].copy_from_slice(&g.data()[src..src + hd]);
                        }
                    }
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx))]
            }
            Op::RowNormalize { norms } => {
                let y = &node.value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; y.numel()];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                vec![(ins[0], Tensor::new(y.shape().to_vec(), dx))]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn d_x_squared_at_3_is_6() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), true);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let y = g.mul(xn, xn).unwrap();
        let grads = g.backward(y).unwrap();
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg.len(), 1);
        assert!((pg[0].1.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_log_sum_exp_is_softmax() {
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]),
            true,
        );
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let l = g.log_sum_exp(xn);
        let loss = g.sum_all(l);
        let grads = g.backward(loss).unwrap();
        let pg = &g.param_grads(&grads, &store)[0].1;
        let sm = tensor::softmax_last(store.get(x));
        for (a, b) in pg.data().iter().zip(sm.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0), true);
        let y = store.add("y", Tensor::scalar(5.0), true);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let _yn = g.param(&store, y);
        let loss = g.mul(xn, xn).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads, &store);
        let gy = pg.iter().find(|(pid, _)| *pid == y).unwrap();
        assert_eq!(gy.1.item(), 0.0);
    }

    #[test]
    fn frozen_param_never_binds() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0), false);
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let loss = g.mul(xn, xn).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(g.bindings().is_empty());
        assert!(g.param_grads(&grads, &store).is_empty());
    }

    #[test]
    fn backward_is_linear_in_loss_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add_normal("w", &[3, 3], 1.0, &mut rng, true);
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);

        let run = |store: &ParamStore, scale: f64| -> Tensor {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let wn = g.param(store, w);
            let y = g.matmul(xn, wn).unwrap();
            let y = g.relu(y);
            let l = g.mean_all(y);
            let l = g.scale(l, scale);
            let grads = g.backward(l).unwrap();
            g.param_grads(&grads, store).remove(0).1
        };
        let g1 = run(&store, 1.0);
        let g3 = run(&store, 3.0);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. Since a node can only consume nodes that already exist, the
//! recording order is a topological order and [`Tape::backward`] is a single
//! reverse sweep over it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation that produced a node, with whatever the backward pass needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    TransposeLast2(NodeId),
    AddRowBias(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    /// Elementwise product with a constant mask (dropout).
    Mask(NodeId, Vec<f32>),
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    ConcatChannels { inputs: Vec<NodeId>, channels: Vec<usize> },
    /// Mean negative log of clamped probabilities at the label positions.
    Nll { probs: NodeId, labels: Vec<usize>, clamp: f32 },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::TransposeLast2(a) | Op::Relu(a) | Op::Softmax(a) | Op::Mask(a, _) => {
                vec![*a]
            }
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool2d { input, .. } => vec![*input],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::ConcatChannels { inputs, .. } => inputs.clone(),
            Op::Nll { probs, .. } => vec![*probs],
        }
    }

    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::TransposeLast2(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Mask(..) => "mask",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::ConcatChannels { .. } => "concat",
            Op::Nll { .. } => "nll",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
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

    /// A leaf whose gradient is wanted.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Operation names in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.kind()).collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            for (input, contribution) in backward_node(&nodes, node, g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of tracked leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn elementwise(self, other: Var<'t>, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(Tensor::new(a.shape(), data)?, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Multiply by a scalar constant.
    pub fn scale(self, factor: f32) -> Var<'t> {
        let v = self.value().map(|x| x * factor);
        self.tape.push(v, Op::Scale(self.id, factor))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f32 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::DimMismatch(format!("matmul needs rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::DimMismatch(format!("matmul inner dims {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        Ok(self.tape.push(Tensor::new(&[m, n], c)?, Op::MatMul(self.id, other.id)))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`, accumulated in `f64`.
    ///
    /// Products of two `f32` values are exact in `f64`, so for well-scaled
    /// operands the result does not depend on the order of the contraction
    /// index. Attention relies on this to permute positions bit-exactly.
    pub fn batch_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[bs, m, k], &[bs2, k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::DimMismatch(format!("batch_matmul needs rank-3 operands, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if bs != bs2 || k != k2 {
            return Err(Error::DimMismatch(format!("batch_matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            exact_order_matmul(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.tape.push(Tensor::new(&[bs, m, n], c)?, Op::BatchMatMul(self.id, other.id)))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (batch, m, n) = match *a.shape() {
            [m, n] => (1, m, n),
            [b, m, n] => (b, m, n),
            _ => return Err(Error::DimMismatch(format!("transpose needs rank 2 or 3, got {:?}", a.shape()))),
        };
        let data = transpose_last2(a.data(), batch, m, n);
        let mut shape = a.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.tape.push(Tensor::new(&shape, data)?, Op::TransposeLast2(self.id)))
    }

    /// `[N, U] + [U]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let &[_, u] = x.shape() else {
            return Err(Error::DimMismatch(format!("row bias needs rank-2 input, got {:?}", x.shape())));
        };
        if b.shape() != [u] {
            return Err(Error::DimMismatch(format!("bias {:?} for rows of width {u}", b.shape())));
        }
        let data = x.data().chunks(u).flat_map(|row| row.iter().zip(b.data()).map(|(v, bv)| v + bv)).collect();
        Ok(self.tape.push(Tensor::new(x.shape(), data)?, Op::AddRowBias(self.id, bias.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push(v, Op::Relu(self.id))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let k = *x.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(k) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let start = out.len();
            let mut total = 0.0f64;
            for &v in row {
                let e = (v - max).exp();
                total += e as f64;
                out.push(e);
            }
            let total = total as f32;
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let t = Tensor::new(x.shape(), out).expect("same shape");
        self.tape.push(t, Op::Softmax(self.id))
    }

    pub(crate) fn mask(self, mask: Vec<f32>) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        self.tape.push(t, Op::Mask(self.id, mask))
    }
}

fn exact_order_matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            for (s, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *s += av * bv as f64;
            }
        }
        for (dst, &s) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = s as f32;
        }
    }
}

pub(crate) fn transpose_last2(data: &[f32], batch: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Vector-Jacobian products of one node: `(input id, gradient)` pairs.
fn backward_node(nodes: &[Node], node: &Node, g: Vec<f32>) -> Vec<(NodeId, Vec<f32>)> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let wants = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
        Op::Sub(a, b) => {
            let neg = g.iter().map(|v| -v).collect();
            vec![(*a, g), (*b, neg)]
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let ga = g.iter().zip(y).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(x).map(|(g, x)| g * x).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Reshape(a) => vec![(*a, g)],
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = Vec::new();
            if wants(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, &g, false, y.data(), true, &mut ga, 0.0);
                out.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, x.data(), true, &g, false, &mut gb, 0.0);
                out.push((*b, gb));
            }
            out
        }
        Op::BatchMatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (bs, m, k, n) = (x.shape()[0], x.shape()[1], x.shape()[2], y.shape()[2]);
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if wants(*a) {
                    let yi = &y.data()[i * k * n..(i + 1) * k * n];
                    kernels::gemm(m, n, k, gi, false, yi, true, &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                }
                if wants(*b) {
                    let xi = &x.data()[i * m * k..(i + 1) * m * k];
                    kernels::gemm(k, m, n, xi, true, gi, false, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::TransposeLast2(a) => {
            let s = node.value.shape();
            let r = s.len();
            let batch = if r == 3 { s[0] } else { 1 };
            // output is [.., n, m]; its transpose restores the input layout
            vec![(*a, transpose_last2(&g, batch, s[r - 2], s[r - 1]))]
        }
        Op::AddRowBias(x, b) => {
            let u = val(*b).numel();
            let mut gb = vec![0.0; u];
            for row in g.chunks(u) {
                gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
            }
            vec![(*x, g), (*b, gb)]
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            vec![(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let k = *node.value.shape().last().unwrap();
            let mut gx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![(*a, gx)]
        }
        Op::Mask(a, mask) => vec![(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        Op::Conv2d { input, weight, bias, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(geom, val(*input).data(), val(*weight).data(), &g, wants(*input));
            let mut out = vec![(*weight, dw)];
            if let Some(dx) = dx {
                out.push((*input, dx));
            }
            if let Some(b) = bias {
                out.push((*b, db));
            }
            out
        }
        Op::MaxPool2d { input, argmax } => {
            let mut dx = vec![0.0; val(*input).numel()];
            for (gv, &idx) in g.iter().zip(argmax) {
                dx[idx] += gv;
            }
            vec![(*input, dx)]
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
            let shape = val(*input).shape();
            let (n, c) = (shape[0], shape[1]);
            let plane: usize = shape[2..].iter().product();
            let count = (n * plane) as f32;
            let gam = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                    for (gv, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ch] += gv * xh;
                        dbeta[ch] += gv;
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                    let k = gam[ch] * inv_std[ch];
                    for ((d, gv), xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                        *d = if *batch_stats {
                            k * (gv - (dbeta[ch] + xh * dgamma[ch]) / count)
                        } else {
                            k * gv
                        };
                    }
                }
            }
            vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::ConcatChannels { inputs, channels } => {
            let shape = node.value.shape();
            let (n, total) = (shape[0], shape[1]);
            let plane: usize = shape[2..].iter().product();
            let mut out = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for (&id, &ch) in inputs.iter().zip(channels) {
                let mut gi = Vec::with_capacity(n * ch * plane);
                for s in 0..n {
                    let start = (s * total + offset) * plane;
                    gi.extend_from_slice(&g[start..start + ch * plane]);
                }
                out.push((id, gi));
                offset += ch;
            }
            out
        }
        Op::Nll { probs, labels, clamp } => {
            let p = val(*probs);
            let k = p.shape()[1];
            let n = labels.len() as f32;
            let mut gp = vec![0.0; p.numel()];
            for (i, &label) in labels.iter().enumerate() {
                let v = p.data()[i * k + label];
                if v >= *clamp {
                    gp[i * k + label] = -g[0] / (n * v);
                }
            }
            vec![(*probs, gp)]
        }
    }
}

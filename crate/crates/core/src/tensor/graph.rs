//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] is an append-only tape of eagerly evaluated nodes; a
//! [`Tensor`] is a handle into it. Nodes are pushed in topological order,
//! so the backward pass is a single reverse sweep. Training code builds a
//! fresh graph per optimisation phase and drops it afterwards, which is
//! what guarantees that gradients never accumulate across steps.
//!
//! Gradient propagation is pruned: a node only participates in backward
//! if some leaf below it was created with `requires_grad`. Binding a
//! parameter as a non-grad leaf therefore freezes it while still letting
//! gradients flow *through* the ops it feeds (needed when translator
//! parameters are trained through a frozen denoiser).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::array::Array;
use super::conv;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    AddChannel { x: usize, bias: usize },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    Concat { a: usize, b: usize },
    MatVec { w: usize, v: usize },
    Conv2d { x: usize, w: usize, stride: usize, padding: usize },
    ConvTranspose2d { x: usize, w: usize, stride: usize, padding: usize },
    AvgPool2d { x: usize, k: usize },
    BnTrain { x: usize, gamma: usize, beta: usize },
    Sum(usize),
    Mean(usize),
    SumSq(usize),
    SumAbs(usize),
}

#[derive(Debug)]
enum Aux {
    None,
    Bn { xhat: Array, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array,
    needs_grad: bool,
    aux: Aux,
}

#[derive(Debug, Default)]
struct GraphInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
}

/// Tape of recorded operations; cheap to clone (shared handle).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

/// Per-channel batch statistics produced by a training-mode batch norm,
/// for the caller to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Array,
    /// Unbiased (N-1) variance, the convention used for running stats.
    pub var: Array,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor {
        self.push(Op::Leaf, value, requires_grad, Aux::None)
    }

    pub fn constant(&self, value: Array) -> Tensor {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(Array::scalar(value))
    }

    fn push(&self, op: Op, value: Array, needs_grad: bool, aux: Aux) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, value, needs_grad, aux });
        inner.grads.push(None);
        Tensor { graph: self.clone(), id: inner.nodes.len() - 1 }
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

macro_rules! check_same_graph {
    ($a:expr, $b:expr) => {
        if !$a.graph.same_graph(&$b.graph) {
            return Err(Error::contract("tensors belong to different graphs"));
        }
    };
}

impl Tensor {
    /// Handle to the owning graph.
    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn array(&self) -> Array {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    /// Gradient attached by the latest backward pass, if any.
    pub fn grad(&self) -> Option<Array> {
        self.graph.inner.borrow().grads[self.id].clone()
    }

    fn unary(&self, f: impl FnOnce(&Array) -> Array, op: Op) -> Tensor {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            (f(&node.value), node.needs_grad)
        };
        self.graph.push(op, value, needs, Aux::None)
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl FnOnce(&Array, &Array) -> Result<Array>,
        op: Op,
    ) -> Result<Tensor> {
        check_same_graph!(self, other);
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            (f(&a.value, &b.value)?, a.needs_grad || b.needs_grad)
        };
        Ok(self.graph.push(op, value, needs, Aux::None))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a.axpy(b, 1.0), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a.axpy(b, -1.0), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            |a, b| {
                a.check_same_shape(b, "mul")?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Array::new(a.shape().to_vec(), data)
            },
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|a| a.map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Tensor {
        // explicit comparison so NaN propagates instead of being masked
        // by f64::max, keeping poisoned values visible to runtime checks
        self.unary(
            |a| a.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }),
            Op::Relu(self.id),
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    /// Broadcast-add a `[C]` bias over a `[B,C,H,W]` tensor.
    pub fn add_channel(&self, bias: &Tensor) -> Result<Tensor> {
        self.binary(
            bias,
            |x, b| {
                check_channel_vector(x, b, "add_channel bias")?;
                let mut out = x.clone();
                broadcast_channel(&mut out, b, |v, s| v + s);
                Ok(out)
            },
            Op::AddChannel { x: self.id, bias: bias.id },
        )
    }

    /// Per-channel affine `x * scale[c] + shift[c]` over `[B,C,H,W]`.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        check_same_graph!(self, scale);
        check_same_graph!(self, shift);
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let s = &inner.nodes[scale.id];
            let t = &inner.nodes[shift.id];
            check_channel_vector(&x.value, &s.value, "channel_affine scale")?;
            check_channel_vector(&x.value, &t.value, "channel_affine shift")?;
            let mut out = x.value.clone();
            broadcast_channel(&mut out, &s.value, |v, sc| v * sc);
            broadcast_channel(&mut out, &t.value, |v, sh| v + sh);
            (out, x.needs_grad || s.needs_grad || t.needs_grad)
        };
        Ok(self.graph.push(
            Op::ChannelAffine { x: self.id, scale: scale.id, shift: shift.id },
            value,
            needs,
            Aux::None,
        ))
    }

    /// Concatenate along the channel axis of `[B,C,H,W]` tensors.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            |a, b| {
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 4
                    || sb.len() != 4
                    || sa[0] != sb[0]
                    || sa[2] != sb[2]
                    || sa[3] != sb[3]
                {
                    return Err(Error::shape(format!(
                        "concat_channels: {sa:?} vs {sb:?}"
                    )));
                }
                let (bn, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
                let plane = h * w;
                let mut out = Array::zeros(&[bn, ca + cb, h, w]);
                let od = out.data_mut();
                for bi in 0..bn {
                    let dst = &mut od[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
                    dst[..ca * plane]
                        .copy_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
                    dst[ca * plane..]
                        .copy_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
                }
                Ok(out)
            },
            Op::Concat { a: self.id, b: other.id },
        )
    }

    /// `w[M,N] · v[N] -> [M]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        self.binary(
            v,
            |w, vv| {
                let ws = w.shape();
                if ws.len() != 2 || vv.shape().len() != 1 || ws[1] != vv.shape()[0] {
                    return Err(Error::shape(format!(
                        "matvec: {:?} x {:?}",
                        ws,
                        vv.shape()
                    )));
                }
                let (m, n) = (ws[0], ws[1]);
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &w.data()[i * n..(i + 1) * n];
                    out[i] = row.iter().zip(vv.data()).map(|(a, b)| a * b).sum();
                }
                Ok(Array::from_vec(out))
            },
            Op::MatVec { w: self.id, v: v.id },
        )
    }

    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        self.binary(
            weight,
            |x, w| conv::conv2d_forward(x, w, stride, padding),
            Op::Conv2d { x: self.id, w: weight.id, stride, padding },
        )
    }

    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        self.binary(
            weight,
            |x, w| conv::conv_transpose2d_forward(x, w, stride, padding),
            Op::ConvTranspose2d { x: self.id, w: weight.id, stride, padding },
        )
    }

    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (value, needs) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            (conv::avg_pool2d_forward(&node.value, k)?, node.needs_grad)
        };
        Ok(self.graph.push(Op::AvgPool2d { x: self.id, k }, value, needs, Aux::None))
    }

    /// Training-mode batch normalisation over `[B,C,H,W]`, normalising per
    /// channel with biased batch variance. Returns the output plus the
    /// batch statistics for the caller's running-average update.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BnBatchStats)> {
        check_same_graph!(self, gamma);
        check_same_graph!(self, beta);
        let (value, xhat, inv_std, stats, needs) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let g = &inner.nodes[gamma.id];
            let b = &inner.nodes[beta.id];
            check_channel_vector(&x.value, &g.value, "batch_norm gamma")?;
            check_channel_vector(&x.value, &b.value, "batch_norm beta")?;

            let shape = x.value.shape();
            let (bn, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let n = bn * h * w;
            let plane = h * w;
            let xd = x.value.data();

            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..bn {
                    let base = (bi * c + ci) * plane;
                    for p in 0..plane {
                        acc += xd[base + p];
                    }
                }
                mean[ci] = acc / n as f64;
                let mut sq = 0.0;
                for bi in 0..bn {
                    let base = (bi * c + ci) * plane;
                    for p in 0..plane {
                        let d = xd[base + p] - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / n as f64;
            }

            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = Array::zeros(shape);
            let mut out = Array::zeros(shape);
            {
                let xh = xhat.data_mut();
                for bi in 0..bn {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            xh[base + p] = (xd[base + p] - mean[ci]) * inv_std[ci];
                        }
                    }
                }
            }
            {
                let od = out.data_mut();
                let xh = xhat.data();
                let gd = g.value.data();
                let bd = b.value.data();
                for bi in 0..bn {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            od[base + p] = xh[base + p] * gd[ci] + bd[ci];
                        }
                    }
                }
            }

            // Running stats use the unbiased variance when defined.
            let var_unbiased: Vec<f64> = if n > 1 {
                var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var.clone()
            };
            let stats = BnBatchStats {
                mean: Array::from_vec(mean),
                var: Array::from_vec(var_unbiased),
            };
            (
                out,
                xhat,
                inv_std,
                stats,
                x.needs_grad || g.needs_grad || b.needs_grad,
            )
        };
        let t = self.graph.push(
            Op::BnTrain { x: self.id, gamma: gamma.id, beta: beta.id },
            value,
            needs,
            Aux::Bn { xhat, inv_std },
        );
        Ok((t, stats))
    }

    pub fn sum(&self) -> Tensor {
        self.unary(|a| Array::scalar(a.data().iter().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor {
        self.unary(
            |a| Array::scalar(a.data().iter().sum::<f64>() / a.numel() as f64),
            Op::Mean(self.id),
        )
    }

    /// Squared L2 norm: sum of squared entries.
    pub fn sum_sq(&self) -> Tensor {
        self.unary(
            |a| Array::scalar(a.data().iter().map(|v| v * v).sum()),
            Op::SumSq(self.id),
        )
    }

    /// L1 norm: sum of absolute entries.
    pub fn sum_abs(&self) -> Tensor {
        self.unary(
            |a| Array::scalar(a.data().iter().map(|v| v.abs()).sum()),
            Op::SumAbs(self.id),
        )
    }

    /// Reverse-mode pass from a scalar loss; gradients become readable via
    /// [`Tensor::grad`] on every participating node. A second call on the
    /// same graph accumulates.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.graph.inner.borrow_mut();
        if inner.nodes[self.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                inner.nodes[self.id].value.shape()
            )));
        }
        if !inner.nodes[self.id].needs_grad {
            return Ok(());
        }
        let seed = Array::scalar(1.0);
        accumulate(&mut inner.grads[self.id], &seed)?;

        for id in (0..=self.id).rev() {
            if !inner.nodes[id].needs_grad {
                continue;
            }
            // Interior gradients are consumed as they propagate; only leaf
            // gradients persist (and accumulate across repeated passes).
            let g = if matches!(inner.nodes[id].op, Op::Leaf) {
                match &inner.grads[id] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match inner.grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            backprop_node(&mut inner, id, &g)?;
        }
        Ok(())
    }
}

fn check_channel_vector(x: &Array, v: &Array, ctx: &str) -> Result<()> {
    if x.shape().len() != 4 || v.shape().len() != 1 || v.shape()[0] != x.shape()[1] {
        return Err(Error::shape(format!(
            "{ctx}: tensor {:?} with vector {:?}",
            x.shape(),
            v.shape()
        )));
    }
    Ok(())
}

fn broadcast_channel(x: &mut Array, v: &Array, f: impl Fn(f64, f64) -> f64) {
    let shape = x.shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let xd = x.data_mut();
    let vd = v.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for p in 0..plane {
                xd[base + p] = f(xd[base + p], vd[ci]);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array>, g: &Array) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn add_into(inner: &mut GraphInner, id: usize, g: Array) -> Result<()> {
    if !inner.nodes[id].needs_grad {
        return Ok(());
    }
    match &mut inner.grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backprop_node(inner: &mut GraphInner, id: usize, g: &Array) -> Result<()> {
    let op = inner.nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(inner, a, g.clone())?;
            add_into(inner, b, g.clone())?;
        }
        Op::Sub(a, b) => {
            add_into(inner, a, g.clone())?;
            add_into(inner, b, g.map(|v| -v))?;
        }
        Op::Mul(a, b) => {
            let ga = {
                let bv = &inner.nodes[b].value;
                mul_elem(g, bv)
            };
            let gb = {
                let av = &inner.nodes[a].value;
                mul_elem(g, av)
            };
            add_into(inner, a, ga)?;
            add_into(inner, b, gb)?;
        }
        Op::Scale(a, c) => {
            add_into(inner, a, g.map(|v| v * c))?;
        }
        Op::Relu(a) => {
            let ga = {
                let x = &inner.nodes[a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                Array::new(x.shape().to_vec(), data)?
            };
            add_into(inner, a, ga)?;
        }
        Op::Tanh(a) => {
            let ga = {
                let y = &inner.nodes[id].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                Array::new(y.shape().to_vec(), data)?
            };
            add_into(inner, a, ga)?;
        }
        Op::AddChannel { x, bias } => {
            add_into(inner, x, g.clone())?;
            if inner.nodes[bias].needs_grad {
                let gb = sum_over_channel(g);
                add_into(inner, bias, gb)?;
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            if inner.nodes[x].needs_grad {
                let sv = inner.nodes[scale].value.clone();
                let mut gx = g.clone();
                broadcast_channel(&mut gx, &sv, |v, s| v * s);
                add_into(inner, x, gx)?;
            }
            if inner.nodes[scale].needs_grad {
                let prod = mul_elem(g, &inner.nodes[x].value);
                add_into(inner, scale, sum_over_channel(&prod))?;
            }
            if inner.nodes[shift].needs_grad {
                add_into(inner, shift, sum_over_channel(g))?;
            }
        }
        Op::Concat { a, b } => {
            let ca = inner.nodes[a].value.shape()[1];
            let (ga, gb) = split_channels(g, ca);
            add_into(inner, a, ga)?;
            add_into(inner, b, gb)?;
        }
        Op::MatVec { w, v } => {
            let (m, n) = {
                let ws = inner.nodes[w].value.shape();
                (ws[0], ws[1])
            };
            if inner.nodes[w].needs_grad {
                let vv = inner.nodes[v].value.clone();
                let mut gw = Array::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        gw.data_mut()[i * n + j] = g.data()[i] * vv.data()[j];
                    }
                }
                add_into(inner, w, gw)?;
            }
            if inner.nodes[v].needs_grad {
                let wv = inner.nodes[w].value.clone();
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    let row = &wv.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        gv[j] += row[j] * g.data()[i];
                    }
                }
                add_into(inner, v, Array::from_vec(gv))?;
            }
        }
        Op::Conv2d { x, w, stride, padding } => {
            if inner.nodes[x].needs_grad {
                let gx = conv::conv2d_backward_input(
                    g,
                    &inner.nodes[w].value,
                    &inner.nodes[x].value.shape().to_vec(),
                    stride,
                    padding,
                )?;
                add_into(inner, x, gx)?;
            }
            if inner.nodes[w].needs_grad {
                let gw = conv::conv2d_backward_weight(
                    g,
                    &inner.nodes[x].value,
                    &inner.nodes[w].value.shape().to_vec(),
                    stride,
                    padding,
                )?;
                add_into(inner, w, gw)?;
            }
        }
        Op::ConvTranspose2d { x, w, stride, padding } => {
            if inner.nodes[x].needs_grad {
                let gx = conv::conv_transpose2d_backward_input(
                    g,
                    &inner.nodes[w].value,
                    &inner.nodes[x].value.shape().to_vec(),
                    stride,
                    padding,
                )?;
                add_into(inner, x, gx)?;
            }
            if inner.nodes[w].needs_grad {
                let gw = conv::conv_transpose2d_backward_weight(
                    g,
                    &inner.nodes[x].value,
                    &inner.nodes[w].value.shape().to_vec(),
                    stride,
                    padding,
                )?;
                add_into(inner, w, gw)?;
            }
        }
        Op::AvgPool2d { x, k } => {
            let gx = conv::avg_pool2d_backward(g, &inner.nodes[x].value.shape().to_vec(), k);
            add_into(inner, x, gx)?;
        }
        Op::BnTrain { x, gamma, beta } => {
            let (xhat, inv_std) = match &inner.nodes[id].aux {
                Aux::Bn { xhat, inv_std } => (xhat.clone(), inv_std.clone()),
                _ => unreachable!("batch norm node carries bn aux"),
            };
            let shape = xhat.shape().to_vec();
            let (bn, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let n = (bn * plane) as f64;
            let gamma_v = inner.nodes[gamma].value.clone();

            if inner.nodes[gamma].needs_grad {
                let prod = mul_elem(g, &xhat);
                add_into(inner, gamma, sum_over_channel(&prod))?;
            }
            if inner.nodes[beta].needs_grad {
                add_into(inner, beta, sum_over_channel(g))?;
            }
            if inner.nodes[x].needs_grad {
                // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let gd = g.data();
                let xh = xhat.data();
                let mut gx = Array::zeros(&shape);
                for ci in 0..c {
                    let gcoef = gamma_v.data()[ci];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for bi in 0..bn {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            let dxh = gd[base + p] * gcoef;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[base + p];
                        }
                    }
                    let mean_dxhat = sum_dxhat / n;
                    let mean_dxhat_xhat = sum_dxhat_xhat / n;
                    let gxd = gx.data_mut();
                    for bi in 0..bn {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            let dxh = gd[base + p] * gcoef;
                            gxd[base + p] = inv_std[ci]
                                * (dxh - mean_dxhat - xh[base + p] * mean_dxhat_xhat);
                        }
                    }
                }
                add_into(inner, x, gx)?;
            }
        }
        Op::Sum(a) => {
            let shape = inner.nodes[a].value.shape().to_vec();
            add_into(inner, a, Array::full(&shape, g.data()[0]))?;
        }
        Op::Mean(a) => {
            let shape = inner.nodes[a].value.shape().to_vec();
            let numel: usize = shape.iter().product();
            add_into(inner, a, Array::full(&shape, g.data()[0] / numel as f64))?;
        }
        Op::SumSq(a) => {
            let ga = inner.nodes[a].value.map(|v| 2.0 * v * g.data()[0]);
            add_into(inner, a, ga)?;
        }
        Op::SumAbs(a) => {
            let gv = g.data()[0];
            let ga = inner.nodes[a].value.map(|v| {
                if v > 0.0 {
                    gv
                } else if v < 0.0 {
                    -gv
                } else {
                    0.0
                }
            });
            add_into(inner, a, ga)?;
        }
    }
    Ok(())
}

fn mul_elem(a: &Array, b: &Array) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Array::new(a.shape().to_vec(), data).expect("same-shape product")
}

/// Reduce a `[B,C,H,W]` gradient to per-channel `[C]` sums.
fn sum_over_channel(g: &Array) -> Array {
    let shape = g.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0.0; c];
    let gd = g.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            out[ci] += gd[base..base + plane].iter().sum::<f64>();
        }
    }
    Array::from_vec(out)
}

fn split_channels(g: &Array, ca: usize) -> (Array, Array) {
    let shape = g.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cb = c - ca;
    let plane = h * w;
    let mut a = Array::zeros(&[b, ca, h, w]);
    let mut bb = Array::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src = &g.data()[bi * c * plane..(bi + 1) * c * plane];
        a.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
            .copy_from_slice(&src[..ca * plane]);
        bb.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&src[ca * plane..]);
    }
    (a, bb)
}

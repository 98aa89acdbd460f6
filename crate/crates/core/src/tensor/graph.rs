use std::fmt;

use super::conv::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A scalar function with a hand-written gradient, spliced into the tape as
/// one node. The structural losses enter the graph this way.
pub trait ScalarObjective {
    fn name(&self) -> &str;

    /// Returns the value and its gradient with respect to `input`.
    fn evaluate(&self, input: &Tensor) -> Result<(f64, Tensor)>;
}

enum Op {
    Leaf,
    Conv3d(ConvGeom),
    Relu,
    Add,
    Mul,
    ChannelAffine,
    Softmax,
    MaxPool2(Vec<usize>),
    Upsample2,
    GlobalAvgPool,
    Linear,
    Concat(Vec<usize>),
    Sum,
    Mean,
    Scale(f64),
    Objective(Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d(_) => "conv3d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ChannelAffine => "channel_affine",
            Op::Softmax => "softmax_channels",
            Op::MaxPool2(_) => "maxpool2",
            Op::Upsample2 => "upsample2_nearest",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::Concat(_) => "concat_channels",
            Op::Sum => "reduce_sum",
            Op::Mean => "reduce_mean",
            Op::Scale(_) => "scale",
            Op::Objective(_) => "objective",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because every op consumes existing nodes only.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        let axis = a
            .shape()
            .iter()
            .zip(b.shape())
            .position(|(x, y)| x != y)
            .unwrap_or(a.shape().len().min(b.shape().len()));
        return Err(TensorError::ShapeMismatch {
            op,
            axis: format!("axis {axis}"),
            expected: a.shape().get(axis).copied().unwrap_or(0),
            found: b.shape().get(axis).copied().unwrap_or(0),
        });
    }
    Ok(())
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

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor. It becomes a differentiable leaf iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf, Vec::new())
    }

    pub fn conv3d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(xv.shape(), kv.shape(), bv.shape(), stride, padding)?;
        let out = conv::forward(&geom, xv.data(), kv.data(), bv.data());
        let out = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(out, Op::Conv3d(geom), vec![x, kernel, bias]))
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.set_requires_grad(false);
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    /// Per-channel `gamma * x + beta` with `gamma`, `beta` of shape `[C]`.
    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = *xv.shape().first().ok_or(TensorError::Rank {
            op: "channel_affine",
            expected: 1,
            found: vec![],
        })?;
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_affine",
                    axis: format!("{name} length (channels)"),
                    expected: c,
                    found: t.len(),
                });
            }
        }
        let per = xv.len() / c.max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| g[i / per] * v + b[i / per])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ChannelAffine, vec![x, gamma, beta]))
    }

    /// Softmax across the leading (channel) axis, per voxel.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let out = softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::Softmax, vec![x]))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let [c, d, h, w] = xv.dims4("maxpool2")?;
        for (axis, n) in [("D", d), ("H", h), ("W", w)] {
            if n % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: "maxpool2",
                    msg: format!("odd spatial extent {n} on axis {axis}"),
                });
            }
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        let mut arg = Vec::with_capacity(c * od * oh * ow);
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((ci * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if best == usize::MAX || src[i] > best_v {
                                        best = i;
                                        best_v = src[i];
                                    }
                                }
                            }
                        }
                        out.push(best_v);
                        arg.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, od, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2(arg), vec![x]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let [c, d, h, w] = xv.dims4("upsample2_nearest")?;
        let src = xv.data();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * od * oh * ow];
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((ci * d + z / 2) * h + y / 2) * w;
                    let drow = ((ci * od + z) * oh + y) * ow;
                    for xx in 0..ow {
                        out[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, od, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample2, vec![x]))
    }

    /// `[C, ...]` to `[C]` by averaging each channel.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = *xv.shape().first().ok_or(TensorError::Rank {
            op: "global_avg_pool",
            expected: 2,
            found: vec![],
        })?;
        let per = xv.len() / c.max(1);
        let data = xv
            .data()
            .chunks(per.max(1))
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool, vec![x]))
    }

    /// `W x + b` for a vector `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let n = xv.len();
        let (m, wn) = match wv.shape() {
            [m, wn] => (*m, *wn),
            s => {
                return Err(TensorError::Rank {
                    op: "linear",
                    expected: 2,
                    found: s.to_vec(),
                })
            }
        };
        if wn != n {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                axis: "input features".into(),
                expected: wn,
                found: n,
            });
        }
        if bv.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                axis: "bias length".into(),
                expected: m,
                found: bv.len(),
            });
        }
        let data = (0..m)
            .map(|i| {
                let row = &wv.data()[i * n..(i + 1) * n];
                row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>() + bv.data()[i]
            })
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::Linear, vec![x, weight, bias]))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or(TensorError::Invalid {
            op: "concat_channels",
            msg: "no inputs".into(),
        })?);
        let spatial = first.shape()[1..].to_vec();
        let mut splits = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != spatial[..] {
                let axis = v.shape()[1..].iter().zip(&spatial).position(|(a, b)| a != b).unwrap_or(0);
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    axis: format!("spatial axis {axis}"),
                    expected: spatial.get(axis).copied().unwrap_or(0),
                    found: v.shape().get(axis + 1).copied().unwrap_or(0),
                });
            }
            splits.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![splits.iter().sum()];
        shape.extend(spatial);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(splits), parts.to_vec()))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(factor), vec![x])
    }

    pub fn objective(&mut self, x: NodeId, f: &dyn ScalarObjective) -> Result<NodeId> {
        let (value, grad) = f.evaluate(self.value(x))?;
        if grad.shape() != self.value(x).shape() {
            return Err(TensorError::Invalid {
                op: "objective",
                msg: format!("{} returned a gradient of the wrong shape", f.name()),
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::Objective(grad), vec![x]))
    }

    /// Reverse sweep from a scalar node. Every differentiable leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|j| self.nodes[j.0].requires_grad).collect();
            let contribs = self.local_backward(node, &g, &need)?;
            for ((input, contrib), needed) in node.inputs.iter().zip(contribs).zip(need) {
                if !needed {
                    continue;
                }
                if let Some(c) = contrib {
                    match grads[input.0].as_mut() {
                        Some(acc) => acc.add_assign(&c),
                        None => grads[input.0] = Some(c),
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                } else {
                    grads[i] = None;
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d(geom) => {
                let (x, k) = (input(0), input(1));
                let r = conv::backward(geom, x.data(), k.data(), g.data(), [need[0], need[1], need[2]]);
                vec![
                    r.input.map(|d| like(x, d)).transpose()?,
                    r.kernel.map(|d| like(k, d)).transpose()?,
                    r.bias.map(|d| like(input(2), d)).transpose()?,
                ]
            }
            Op::Relu => {
                let x = input(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(like(x, data)?)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let ga = b.data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                let gb = a.data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                vec![Some(like(a, ga)?), Some(like(b, gb)?)]
            }
            Op::ChannelAffine => {
                let (x, gamma) = (input(0), input(1));
                let c = gamma.len();
                let per = x.len() / c.max(1);
                let mut gx = Vec::with_capacity(x.len());
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let xs = &x.data()[ch * per..(ch + 1) * per];
                    let gs = &g.data()[ch * per..(ch + 1) * per];
                    let gm = gamma.data()[ch];
                    for (xv, gv) in xs.iter().zip(gs) {
                        gx.push(gm * gv);
                        gg[ch] += xv * gv;
                        gb[ch] += gv;
                    }
                }
                vec![Some(like(x, gx)?), Some(like(gamma, gg)?), Some(like(input(2), gb)?)]
            }
            Op::Softmax => {
                let p = &node.value;
                let c = p.shape()[0];
                let per = p.len() / c;
                let (pd, gd) = (p.data(), g.data());
                let mut gx = vec![0.0; p.len()];
                for v in 0..per {
                    let dot: f64 = (0..c).map(|ch| pd[ch * per + v] * gd[ch * per + v]).sum();
                    for ch in 0..c {
                        let i = ch * per + v;
                        gx[i] = pd[i] * (gd[i] - dot);
                    }
                }
                vec![Some(like(p, gx)?)]
            }
            Op::MaxPool2(arg) => {
                let x = input(0);
                let mut gx = vec![0.0; x.len()];
                for (gv, &i) in g.data().iter().zip(arg) {
                    gx[i] += gv;
                }
                vec![Some(like(x, gx)?)]
            }
            Op::Upsample2 => {
                let x = input(0);
                let [c, d, h, w] = x.dims4("upsample2_nearest")?;
                let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
                let mut gx = vec![0.0; x.len()];
                for ci in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let srow = ((ci * d + z / 2) * h + y / 2) * w;
                            let drow = ((ci * od + z) * oh + y) * ow;
                            for xx in 0..ow {
                                gx[srow + xx / 2] += g.data()[drow + xx];
                            }
                        }
                    }
                }
                vec![Some(like(x, gx)?)]
            }
            Op::GlobalAvgPool => {
                let x = input(0);
                let c = x.shape()[0];
                let per = x.len() / c.max(1);
                let gx = (0..x.len()).map(|i| g.data()[i / per] / per as f64).collect();
                vec![Some(like(x, gx)?)]
            }
            Op::Linear => {
                let (x, w) = (input(0), input(1));
                let n = x.len();
                let m = g.len();
                let gx = if need[0] {
                    let d = (0..n)
                        .map(|j| (0..m).map(|i| w.data()[i * n + j] * g.data()[i]).sum())
                        .collect();
                    Some(like(x, d)?)
                } else {
                    None
                };
                let gw = if need[1] {
                    let d = (0..m * n).map(|k| g.data()[k / n] * x.data()[k % n]).collect();
                    Some(like(w, d)?)
                } else {
                    None
                };
                vec![gx, gw, Some(g.clone())]
            }
            Op::Concat(splits) => {
                let total: usize = splits.iter().sum();
                let per = g.len() / total.max(1);
                let mut off = 0;
                let mut out = Vec::with_capacity(splits.len());
                for (k, &c) in splits.iter().enumerate() {
                    let d = g.data()[off * per..(off + c) * per].to_vec();
                    out.push(Some(like(input(k), d)?));
                    off += c;
                }
                out
            }
            Op::Sum => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), g.item()))]
            }
            Op::Mean => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::Scale(f) => vec![Some(g.map(|v| v * f))],
            Op::Objective(grad) => vec![Some(grad.map(|v| v * g.item()))],
        })
    }
}

/// Numerically stable softmax across the channel axis of `[C, ...]`.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let c = x.shape().first().copied().unwrap_or(0);
    if c < 2 {
        return Err(TensorError::Invalid {
            op: "softmax_channels",
            msg: format!("need at least 2 channels, got {c}"),
        });
    }
    let per = x.len() / c;
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for v in 0..per {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(xd[ch * per + v]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = (xd[ch * per + v] - m).exp();
            out[ch * per + v] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * per + v] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

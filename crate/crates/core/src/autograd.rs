//! Reverse-mode differentiation over a small static graph.
//!
//! Quantizer nodes (fake-quantize and binarize) are differentiated with the
//! straight-through estimator: the upstream gradient passes unchanged where
//! the quantizer input lies strictly inside its range `(l, u)` and is zeroed
//! elsewhere. Binarize uses the range `(−1, 1)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quant::{self, Granularity, QuantParams, Scheme};
use crate::tensor::{self, col2im, im2col, ConvGeometry, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    /// Forward input at the given slot.
    Input(usize),
    Param(ParamId),
    Const(Tensor),
    /// `a · b`
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    /// Adds a `[C]` bias along dimension 1.
    AddBias,
    Conv2d { stride: usize, padding: usize },
    /// Constant padding of the two spatial dimensions of a 4-D tensor.
    Pad { padding: usize, value: f32 },
    Relu,
    /// `[N × ...] → [N × rest]`
    Flatten,
    FakeQuant(QuantParams),
    /// Fake quantization with params calibrated (min/max) from the input itself.
    FakeQuantMinMax { bits: u8, scheme: Scheme, granularity: Granularity },
    Binarize,
    /// Multiplies by a `[C]` scale along dimension 1.
    ChannelScale,
    Add,
    Scale(f32),
    Sum,
    /// Mean cross-entropy of `[m × c]` logits against fixed labels.
    CrossEntropy(Vec<usize>),
}

impl Op {
    fn arity(&self) -> usize {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => 0,
            Op::MatMul | Op::MatMulNT | Op::AddBias | Op::Conv2d { .. } | Op::ChannelScale | Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
struct NodeDef {
    op: Op,
    inputs: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<NodeDef>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node. Input ids are only checked when the graph is run, so a
    /// node may reference ids added later (and thereby form a cycle).
    pub fn add(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(NodeDef {
            op,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, slot: usize) -> NodeId {
        self.add(Op::Input(slot), &[])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.add(Op::Param(id), &[])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.add(Op::Const(t), &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Op::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Op::MatMulNT, &[a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.add(Op::AddBias, &[x, bias])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> NodeId {
        self.add(Op::Conv2d { stride, padding }, &[x, w])
    }

    pub fn pad(&mut self, x: NodeId, padding: usize, value: f32) -> NodeId {
        self.add(Op::Pad { padding, value }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Relu, &[x])
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Flatten, &[x])
    }

    pub fn fake_quant(&mut self, x: NodeId, params: QuantParams) -> NodeId {
        self.add(Op::FakeQuant(params), &[x])
    }

    pub fn fake_quant_minmax(&mut self, x: NodeId, bits: u8, scheme: Scheme, granularity: Granularity) -> NodeId {
        self.add(Op::FakeQuantMinMax { bits, scheme, granularity }, &[x])
    }

    pub fn binarize(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Binarize, &[x])
    }

    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        self.add(Op::ChannelScale, &[x, scale])
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        self.add(Op::Scale(c), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Sum, &[x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.add(Op::CrossEntropy(labels), &[logits])
    }

    /// Ancestors of `output` (inclusive) in a topological order.
    fn order_for(&self, output: NodeId) -> Result<Vec<NodeId>> {
        if output >= self.nodes.len() {
            return Err(Error::Graph(format!("output node {output} does not exist")));
        }
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut marks = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::new();
        // Iterative DFS; (node, next input index).
        let mut stack = vec![(output, 0usize)];
        marks[output] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let def = &self.nodes[node];
            if def.inputs.len() != def.op.arity() {
                return Err(Error::Graph(format!(
                    "node {node} ({:?}) needs {} inputs, got {}",
                    def.op,
                    def.op.arity(),
                    def.inputs.len()
                )));
            }
            if let Some(&child) = def.inputs.get(*next) {
                *next += 1;
                if child >= self.nodes.len() {
                    return Err(Error::Graph(format!("node {node} references missing node {child}")));
                }
                match marks[child] {
                    Mark::Active => {
                        return Err(Error::Graph(format!("cycle through node {child}")));
                    }
                    Mark::New => {
                        marks[child] = Mark::Active;
                        stack.push((child, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                marks[node] = Mark::Done;
                order.push(node);
                stack.pop();
            }
        }
        Ok(order)
    }
}

/// Per-node state kept for the backward pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    /// Params a min/max fake-quant node calibrated in forward.
    Quant(QuantParams),
    /// Unfolded patches of each image.
    Conv { geometry: ConvGeometry, cols: Vec<Vec<f32>> },
    /// Softmax probabilities.
    Softmax(Tensor),
}

/// Values and saved context of one forward evaluation.
#[derive(Debug)]
pub struct Tape<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
    saved: Vec<Saved>,
    order: Vec<NodeId>,
}

impl Tape<'_> {
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node).and_then(Option::as_ref)
    }
}

fn value(values: &[Option<Tensor>], node: NodeId) -> &Tensor {
    values[node].as_ref().expect("inputs are evaluated before their consumers")
}

/// Evaluates the ancestors of `output` and records a tape.
pub fn forward<'g>(graph: &'g Graph, output: NodeId, inputs: &[Tensor], params: &[Tensor]) -> Result<(Tensor, Tape<'g>)> {
    let order = graph.order_for(output)?;
    let mut values: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    let mut saved = vec![Saved::None; graph.nodes.len()];
    for &node in &order {
        let def = &graph.nodes[node];
        let arg = |i: usize| value(&values, def.inputs[i]);
        let out = match &def.op {
            Op::Input(slot) => inputs
                .get(*slot)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("forward input slot {slot} not supplied")))?,
            Op::Param(id) => params
                .get(*id)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("parameter {id} not supplied")))?,
            Op::Const(t) => t.clone(),
            Op::MatMul => tensor::matmul(arg(0), arg(1))?,
            Op::MatMulNT => tensor::matmul_nt(arg(0), arg(1))?,
            Op::AddBias => add_channel(arg(0), arg(1), |x, b| x + b)?,
            Op::ChannelScale => add_channel(arg(0), arg(1), |x, s| x * s)?,
            Op::Conv2d { stride, padding } => {
                let (x, w) = (arg(0), arg(1));
                let (n, c, h, wd) = x.dims4()?;
                let (o, kc, kh, kw) = w.dims4()?;
                if c != kc {
                    return Err(Error::dim(format!(
                        "conv2d input {:?} vs kernel {:?}",
                        x.shape(),
                        w.shape()
                    )));
                }
                let g = ConvGeometry::new((c, h, wd), (kh, kw), *stride, *padding)?;
                let image = c * h * wd;
                let mut out = vec![0.0f32; n * o * g.out_pixels()];
                let mut cols = Vec::with_capacity(n);
                for (img, dst) in x.data().chunks(image).zip(out.chunks_mut(o * g.out_pixels())) {
                    let patch = im2col(img, &g, 0.0);
                    tensor::matmul_into(w.data(), &patch, dst, o, g.patch_len(), g.out_pixels());
                    cols.push(patch);
                }
                saved[node] = Saved::Conv { geometry: g, cols };
                Tensor::new([n, o, g.out_h, g.out_w], out)?
            }
            Op::Pad { padding, value } => pad(arg(0), *padding, *value)?,
            Op::Relu => arg(0).relu(),
            Op::Flatten => {
                let x = arg(0);
                let lead = x.shape()[0];
                x.reshape([lead, x.numel() / lead])?
            }
            Op::FakeQuant(p) => quant::fake_quantize(arg(0), p)?,
            Op::FakeQuantMinMax { bits, scheme, granularity } => {
                let x = arg(0);
                let p = quant::calibrate_minmax(std::slice::from_ref(x), *bits, *scheme, *granularity)?;
                let out = quant::fake_quantize(x, &p)?;
                saved[node] = Saved::Quant(p);
                out
            }
            Op::Binarize => quant::binarize(arg(0)),
            Op::Add => arg(0).add(arg(1))?,
            Op::Scale(c) => arg(0).scale(*c),
            Op::Sum => Tensor::from_vec(vec![arg(0).sum()]),
            Op::CrossEntropy(labels) => {
                let (loss, probs) = cross_entropy_with_probs(arg(0), labels)?;
                saved[node] = Saved::Softmax(probs);
                Tensor::from_vec(vec![loss])
            }
        };
        values[node] = Some(out);
    }
    let out = values[output].clone().expect("output evaluated");
    Ok((
        out,
        Tape {
            graph,
            values,
            saved,
            order,
        },
    ))
}

/// Channel-wise broadcast over dimension 1 of a 2-D or 4-D tensor.
fn add_channel(x: &Tensor, v: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let (channels, inner) = channel_layout(x)?;
    if v.numel() != channels {
        return Err(Error::dim(format!(
            "channel vector of length {} for tensor {:?}",
            v.numel(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = f(*o, v.data()[(i / inner) % channels]);
    }
    Ok(out)
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        &[_, c] => Ok((c, 1)),
        &[_, c, h, w] => Ok((c, h * w)),
        s => Err(Error::dim(format!("channel op needs a 2-D or 4-D tensor, got {s:?}"))),
    }
}

fn pad(x: &Tensor, padding: usize, value: f32) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if padding == 0 {
        return Ok(x.clone());
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![value; n * c * ph * pw];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(plane * h + y) * w..][..w];
            out[(plane * ph + y + padding) * pw + padding..][..w].copy_from_slice(src);
        }
    }
    Tensor::new([n, c, ph, pw], out)
}

fn crop(g: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, c, ph, pw) = g.dims4()?;
    let (h, w) = (ph - 2 * padding, pw - 2 * padding);
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&g.data()[(plane * ph + y + padding) * pw + padding..][..w]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Straight-through estimator: `δ_out = δ_in` where `l < x < u`, else 0.
pub fn ste_backward(delta_in: &Tensor, x: &Tensor, lower: f32, upper: f32) -> Result<Tensor> {
    if delta_in.shape() != x.shape() {
        return Err(Error::dim(format!(
            "STE gradient {:?} vs input {:?}",
            delta_in.shape(),
            x.shape()
        )));
    }
    let data = delta_in
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &v)| if lower < v && v < upper { d } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// STE against per-element ranges taken from (possibly per-channel) params.
fn ste_backward_params(delta_in: &Tensor, x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    if params.granularity() == Granularity::PerTensor {
        let r = params.range()?;
        return ste_backward(delta_in, x, r.lower(), r.upper());
    }
    let map = params.channel_map(x.shape())?;
    let ranges = params.ranges();
    let data = delta_in
        .data()
        .iter()
        .zip(x.data())
        .enumerate()
        .map(|(i, (&d, &v))| {
            let r = &ranges[map.channel(i)];
            if r.lower() < v && v < r.upper() {
                d
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (m, c) = logits.dims2()?;
    if labels.len() != m {
        return Err(Error::dim(format!("{} labels for {m} rows of logits", labels.len())));
    }
    let mut probs = vec![0.0f32; m * c];
    let mut total = 0.0f64;
    for (i, (row, &label)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
        if label >= c {
            return Err(Error::arg(format!("label {label} outside [0, {c})")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&z| (z as f64 - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        total += norm.ln() - (row[label] as f64 - max);
        for (p, e) in probs[i * c..(i + 1) * c].iter_mut().zip(&exps) {
            *p = (e / norm) as f32;
        }
    }
    Ok(((total / m as f64) as f32, Tensor::new([m, c], probs)?))
}

/// Mean of `−log softmax(logits)[label]` over rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    cross_entropy_with_probs(logits, labels).map(|(loss, _)| loss)
}

/// Gradients of a scalar loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<ParamId, Tensor>,
    pub inputs: BTreeMap<usize, Tensor>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => *existing = existing.add(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Reverse-topological accumulation from a scalar `loss` node.
pub fn backward(tape: &Tape<'_>, loss: NodeId) -> Result<Gradients> {
    let loss_value = tape
        .value(loss)
        .ok_or_else(|| Error::State(format!("node {loss} was not evaluated by the forward pass")))?;
    if loss_value.numel() != 1 {
        return Err(Error::State(format!(
            "backward needs a scalar loss, node {loss} has shape {:?}",
            loss_value.shape()
        )));
    }
    let graph = tape.graph;
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[loss] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));
    let mut out = Gradients::default();

    let pos = tape.order.iter().position(|&n| n == loss).expect("evaluated node is ordered");
    for &node in tape.order[..=pos].iter().rev() {
        let Some(g) = grads[node].take() else { continue };
        let def = &graph.nodes[node];
        let arg = |i: usize| value(&tape.values, def.inputs[i]);
        let mut push = |i: usize, t: Tensor| accumulate(&mut grads[def.inputs[i]], t);
        match &def.op {
            Op::Input(slot) => {
                out.inputs.insert(*slot, g);
            }
            Op::Param(id) => match out.params.get_mut(id) {
                Some(existing) => *existing = existing.add(&g)?,
                None => {
                    out.params.insert(*id, g);
                }
            },
            Op::Const(_) => {}
            Op::MatMul => {
                push(0, tensor::matmul_nt(&g, arg(1))?)?;
                push(1, tensor::matmul_tn(arg(0), &g)?)?;
            }
            Op::MatMulNT => {
                push(0, tensor::matmul(&g, arg(1))?)?;
                push(1, tensor::matmul_tn(&g, arg(0))?)?;
            }
            Op::AddBias => {
                let bias = arg(1);
                let (channels, inner) = channel_layout(&g)?;
                let mut gb = vec![0.0f32; channels];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[(i / inner) % channels] += v;
                }
                push(1, Tensor::new(bias.shape().to_vec(), gb)?)?;
                push(0, g)?;
            }
            Op::ChannelScale => {
                let (x, s) = (arg(0), arg(1));
                let (channels, inner) = channel_layout(&g)?;
                let mut gs = vec![0.0f32; channels];
                for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                    gs[(i / inner) % channels] += gv * xv;
                }
                push(1, Tensor::new(s.shape().to_vec(), gs)?)?;
                push(0, add_channel(&g, s, |gv, sv| gv * sv)?)?;
            }
            Op::Conv2d { .. } => {
                let (x, w) = (arg(0), arg(1));
                let Saved::Conv { geometry, cols } = &tape.saved[node] else {
                    return Err(Error::State(format!("conv node {node} has no saved patches")));
                };
                let (o, patch, pixels) = (w.shape()[0], geometry.patch_len(), geometry.out_pixels());
                let w_mat = w.reshape([o, patch])?;
                let mut gw = Tensor::zeros([o, patch]);
                let mut gx = Vec::with_capacity(x.numel());
                for (g_img, cols_img) in g.data().chunks(o * pixels).zip(cols) {
                    let g_img = Tensor::new([o, pixels], g_img.to_vec())?;
                    let cols_img = Tensor::new([patch, pixels], cols_img.clone())?;
                    gw = gw.add(&tensor::matmul_nt(&g_img, &cols_img)?)?;
                    let g_cols = tensor::matmul_tn(&w_mat, &g_img)?;
                    gx.extend(col2im(g_cols.data(), geometry));
                }
                push(0, Tensor::new(x.shape().to_vec(), gx)?)?;
                push(1, gw.reshape(w.shape().to_vec())?)?;
            }
            Op::Pad { padding, .. } => push(0, crop(&g, *padding)?)?,
            Op::Relu => {
                let x = arg(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                push(0, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Flatten => push(0, g.reshape(arg(0).shape().to_vec())?)?,
            Op::FakeQuant(p) => push(0, ste_backward_params(&g, arg(0), p)?)?,
            Op::FakeQuantMinMax { .. } => {
                let Saved::Quant(p) = &tape.saved[node] else {
                    return Err(Error::State(format!("quant node {node} has no saved params")));
                };
                push(0, ste_backward_params(&g, arg(0), p)?)?
            }
            Op::Binarize => push(0, ste_backward(&g, arg(0), -1.0, 1.0)?)?,
            Op::Add => {
                push(0, g.clone())?;
                push(1, g)?;
            }
            Op::Scale(c) => push(0, g.scale(*c))?,
            Op::Sum => {
                let x = arg(0);
                push(0, Tensor::full(x.shape().to_vec(), g.data()[0]))?;
            }
            Op::CrossEntropy(labels) => {
                let Saved::Softmax(probs) = &tape.saved[node] else {
                    return Err(Error::State(format!("loss node {node} has no saved softmax")));
                };
                let (m, c) = probs.dims2()?;
                let scale = g.data()[0] / m as f32;
                let mut d = probs.clone();
                for (row, &label) in d.data_mut().chunks_exact_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                push(0, d)?;
            }
        }
    }
    if let Some((id, _)) = out.params.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::State(format!("non-finite gradient for parameter {id}")));
    }
    Ok(out)
}

/// `p ← p − lr·g` for every parameter that has a gradient.
pub fn sgd_step(params: &mut [Tensor], grads: &Gradients, lr: f32) -> Result<()> {
    for (&id, g) in &grads.params {
        let p = params
            .get(id)
            .ok_or_else(|| Error::arg(format!("gradient for unknown parameter {id}")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "parameter {id} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    for (&id, g) in &grads.params {
        let p = &mut params[id];
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ste_examples() {
        let d = Tensor::from_vec(vec![2.0, 2.0, 2.0, 2.0]);
        let x = Tensor::from_vec(vec![0.5, 1.5, 0.0, 1.0]);
        assert_eq!(ste_backward(&d, &x, 0.0, 1.0).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(ste_backward(&d, &Tensor::from_vec(vec![0.0]), 0.0, 1.0).is_err());
    }

    #[test]
    fn forward_single_fake_quant() {
        let p = QuantParams::per_tensor(3, Scheme::Affine, -1.0, 1.0).unwrap();
        let mut g = Graph::new();
        let x = g.input(0);
        let q = g.fake_quant(x, p.clone());
        let input = Tensor::from_vec(vec![-0.9, 0.1, 0.33, 2.0]);
        let (out, _) = forward(&g, q, &[input.clone()], &[]).unwrap();
        assert_eq!(out, quant::fake_quantize(&input, &p).unwrap());
    }

    #[test]
    fn cycles_are_detected() {
        let mut g = Graph::new();
        let x = g.input(0);
        let a = g.add(Op::Add, &[x, 2]);
        let b = g.relu(a);
        assert_eq!(b, 2);
        let err = forward(&g, b, &[Tensor::from_vec(vec![1.0])], &[]).unwrap_err();
        assert!(matches!(err, Error::Graph(ref m) if m.contains("cycle")));
    }

    #[test]
    fn sum_of_fake_quant_has_unit_gradient_inside_range() {
        let p = QuantParams::per_tensor(4, Scheme::PaperLiteral, -2.0, 2.0).unwrap();
        let mut g = Graph::new();
        let x = g.input(0);
        let q = g.fake_quant(x, p);
        let s = g.sum(q);
        let input = Tensor::from_vec(vec![-1.9, -0.3, 0.0, 0.77, 1.99]);
        let (_, tape) = forward(&g, s, &[input], &[]).unwrap();
        let grads = backward(&tape, s).unwrap();
        assert_eq!(grads.inputs[&0].data(), &[1.0; 5]);
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let a = Tensor::from_fn([2, 3], |i| i as f32 * 0.5 - 1.0);
        let b = Tensor::from_fn([3, 4], |i| (i as f32).sin());
        let mut g = Graph::new();
        let pa = g.param(0);
        let pb = g.param(1);
        let c = g.matmul(pa, pb);
        let s = g.sum(c);
        let (_, tape) = forward(&g, s, &[], &[a.clone(), b.clone()]).unwrap();
        let grads = backward(&tape, s).unwrap();
        let want = tensor::matmul(&Tensor::ones([2, 4]), &b.transpose().unwrap()).unwrap();
        assert_eq!(grads.params[&0], want);
        // Central differences on one entry as a spot check.
        let h = 1e-2f32;
        let f = |a: &Tensor| tensor::matmul(a, &b).unwrap().sum();
        let (mut ap, mut am) = (a.clone(), a.clone());
        ap.data_mut()[4] += h;
        am.data_mut()[4] -= h;
        let fd = (f(&ap) - f(&am)) / (2.0 * h);
        assert!((fd - grads.params[&0].data()[4]).abs() < 1e-3);
    }

    #[test]
    fn relu_gradient_is_zero_for_negative_inputs() {
        let mut g = Graph::new();
        let x = g.input(0);
        let r = g.relu(x);
        let s = g.sum(r);
        let (_, tape) = forward(&g, s, &[Tensor::from_vec(vec![-1.0, 2.0])], &[]).unwrap();
        assert_eq!(backward(&tape, s).unwrap().inputs[&0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn binarize_backward_clips_at_unit_magnitude() {
        let mut g = Graph::new();
        let x = g.input(0);
        let b = g.binarize(x);
        let s = g.sum(b);
        let input = Tensor::from_vec(vec![-1.0, -0.99, 0.0, 0.5, 1.0, 3.0]);
        let (_, tape) = forward(&g, s, &[input], &[]).unwrap();
        assert_eq!(
            backward(&tape, s).unwrap().inputs[&0].data(),
            &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn backward_needs_an_evaluated_scalar() {
        let mut g = Graph::new();
        let x = g.input(0);
        let r = g.relu(x);
        let other = g.scale(x, 2.0);
        let (_, tape) = forward(&g, r, &[Tensor::from_vec(vec![1.0, 2.0])], &[]).unwrap();
        assert!(matches!(backward(&tape, other), Err(Error::State(_))));
        assert!(matches!(backward(&tape, r), Err(Error::State(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros([3, 4]);
        let loss = cross_entropy(&uniform, &[0, 1, 3]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!((loss - 1.386294).abs() < 1e-6);

        let mut confident = Tensor::zeros([2, 3]);
        confident.data_mut()[1] = 20.0;
        confident.data_mut()[3] = 20.0;
        assert!(cross_entropy(&confident, &[1, 0]).unwrap() < 1e-6);

        assert!(matches!(cross_entropy(&uniform, &[0, 1, 4]), Err(Error::Argument(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let mut grads = Gradients::default();
        grads.params.insert(0, Tensor::from_vec(vec![2.0]));
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params[0].data(), &[1.0]);
        sgd_step(&mut params, &grads, 0.1).unwrap();
        assert!((params[0].data()[0] - 0.8).abs() < 1e-7);
        grads.params.insert(0, Tensor::from_vec(vec![1.0, 1.0]));
        assert!(matches!(sgd_step(&mut params, &grads, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn deterministic_forward() {
        let w = Tensor::from_fn([3, 4], |i| (i as f32 * 1.3).sin());
        let x = Tensor::from_fn([5, 4], |i| (i as f32 * 0.7).cos());
        let mut g = Graph::new();
        let xi = g.input(0);
        let wi = g.param(0);
        let h = g.matmul_nt(xi, wi);
        let r = g.relu(h);
        let l = g.cross_entropy(r, vec![0, 1, 2, 0, 1]);
        let (a, _) = forward(&g, l, &[x.clone()], &[w.clone()]).unwrap();
        let (b, _) = forward(&g, l, &[x], &[w]).unwrap();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }
}

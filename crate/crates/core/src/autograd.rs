//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended after its inputs, so
//! node order is already a topological order and [`Graph::backward`] is a single
//! reverse sweep that visits each node once. Nodes that do not depend on any
//! `requires_grad` leaf are never visited during the sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Resize {
        input: Var,
        dims: [usize; 4],
    },
    Concat {
        inputs: Vec<Var>,
    },
    Softmax(Var),
    CePixel {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Mse {
        input: Var,
        target: Vec<f64>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if self.value(bias).shape() != [geom.out_channels] {
            return Err(Error::Shape(format!(
                "conv2d bias has shape {:?}, expected [{}]",
                self.value(bias).shape(),
                geom.out_channels
            )));
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Half-pixel-center bilinear resampling of an `[N,C,H,W]` tensor.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = kernels::check_resize(self.value(x).shape(), out_h, out_w)?;
        let out = kernels::bilinear_forward(dims, self.value(x).data(), out_h, out_w);
        let value = Tensor::new(vec![dims[0], dims[1], out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resize { input: x, dims }, rg))
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(
            *inputs
                .first()
                .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?,
        );
        let [n, _, h, w] = first.dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(v).shape(),
                    first.shape()
                )));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let out = kernels::softmax_channels(dims, self.value(x).data())?;
        let value = Tensor::new(dims.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Per-pixel cross-entropy `-log softmax(logits)[target]`, shape `[N,H,W]`.
    pub fn ce_pixel(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(Error::Shape(format!(
                "ce_pixel: {} targets for logits {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Invalid(format!(
                "ce_pixel: target {t} at flat pixel {i} is not below class count {c}"
            )));
        }
        let probs = kernels::softmax_channels([n, c, h, w], self.value(logits).data())?;
        let mut out = vec![0.0; n * plane];
        // log-sum-exp rather than ln(prob) keeps saturated logits finite.
        let data = self.value(logits).data();
        for b in 0..n {
            for p in 0..plane {
                let t = targets[b * plane + p];
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c).map(|ch| data[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).map(|ch| (data[idx(ch)] - max).exp()).sum::<f64>().ln();
                out[b * plane + p] = lse - data[idx(t)];
            }
        }
        let value = Tensor::new(vec![n, h, w], out)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CePixel {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| if *w == 0.0 { 0.0 } else { v * w })
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input: x, weights }, rg))
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.value(x).check_same_shape(target)?;
        let n = target.numel().max(1) as f64;
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Mse {
                input: x,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).axpy(1.0, self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .unwrap_or_else(|| vec![0.0; node.value.numel()])
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Graph)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.take_grad(v);
        f(&mut g, self);
        self.put_grad(v, g);
    }

    /// Populates `d loss / d v` for every node `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any trainable parameter".into(),
            ));
        }
        self.backward_done = true;
        self.put_grad(loss, vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let go = self.nodes[idx].grad.take().expect("checked above");
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &go);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(go);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op, go: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let mut gi = self.nodes[input.0].requires_grad.then(|| self.take_grad(input));
                let mut gk = self.nodes[kernel.0].requires_grad.then(|| self.take_grad(kernel));
                let mut gb = self.nodes[bias.0].requires_grad.then(|| self.take_grad(bias));
                kernels::conv2d_backward(
                    geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    go,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(g) = gi {
                    self.put_grad(input, g);
                }
                if let Some(g) = gk {
                    self.put_grad(kernel, g);
                }
                if let Some(g) = gb {
                    self.put_grad(bias, g);
                }
            }
            Op::Relu(x) => {
                self.accumulate(*x, |g, graph| {
                    let out = graph.nodes[idx].value.data();
                    for ((gx, &o), &d) in g.iter_mut().zip(out).zip(go) {
                        if o > 0.0 {
                            *gx += d;
                        }
                    }
                });
            }
            Op::Resize { input, dims } => {
                let [_, _, oh, ow] = self.nodes[idx].value.dims4().expect("4-d");
                let dims = *dims;
                self.accumulate(*input, |g, _| {
                    kernels::bilinear_backward(dims, go, oh, ow, g)
                });
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = self.nodes[idx].value.dims4().expect("4-d");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    self.accumulate(v, |g, _| {
                        for b in 0..n {
                            let src = &go[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            let dst = &mut g[b * c * plane..(b + 1) * c * plane];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                self.accumulate(*x, |g, graph| {
                    let [n, c, h, w] = graph.nodes[idx].value.dims4().expect("4-d");
                    let y = graph.nodes[idx].value.data();
                    let plane = h * w;
                    for b in 0..n {
                        for p in 0..plane {
                            let at = |ch: usize| (b * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| y[at(ch)] * go[at(ch)]).sum();
                            for ch in 0..c {
                                g[at(ch)] += y[at(ch)] * (go[at(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CePixel {
                logits,
                targets,
                probs,
            } => {
                self.accumulate(*logits, |g, graph| {
                    let [n, c, h, w] = graph.value(*logits).dims4().expect("4-d");
                    let plane = h * w;
                    for b in 0..n {
                        for p in 0..plane {
                            let d = go[b * plane + p];
                            if d == 0.0 {
                                continue;
                            }
                            let t = targets[b * plane + p];
                            for ch in 0..c {
                                let i = (b * c + ch) * plane + p;
                                let onehot = if ch == t { 1.0 } else { 0.0 };
                                g[i] += d * (probs[i] - onehot);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                let d = go[0];
                self.accumulate(*input, |g, _| {
                    for (gx, w) in g.iter_mut().zip(weights) {
                        *gx += d * w;
                    }
                });
            }
            Op::Mse { input, target } => {
                let d = go[0];
                self.accumulate(*input, |g, graph| {
                    let x = graph.value(*input).data();
                    let scale = 2.0 * d / target.len().max(1) as f64;
                    for ((gx, a), b) in g.iter_mut().zip(x).zip(target) {
                        *gx += scale * (a - b);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |g, _| {
                        for (gx, d) in g.iter_mut().zip(go) {
                            *gx += d;
                        }
                    });
                }
            }
            Op::Scale(x, factor) => {
                let factor = *factor;
                self.accumulate(*x, |g, _| {
                    for (gx, d) in g.iter_mut().zip(go) {
                        *gx += d * factor;
                    }
                });
            }
            Op::Sum(x) => {
                let d = go[0];
                self.accumulate(*x, |g, _| g.iter_mut().for_each(|gx| *gx += d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                let d = go[0] / n;
                self.accumulate(*x, |g, _| g.iter_mut().for_each(|gx| *gx += d));
            }
        }
    }
}

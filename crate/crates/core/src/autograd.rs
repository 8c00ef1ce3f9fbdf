//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in construction order, which is a topological order: every input of a
//! node already exists when the node is created. `backward` replays the tape in reverse.

use crate::error::{Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_forward};
use crate::kernels::norm::{bn_apply, bn_backward, channel_stats, l2norm_backward, l2norm_forward, BnSaved};
use crate::kernels::pool::{maxpool_backward, maxpool_forward};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator tag plus whatever the forward pass saved for the backward pass.
#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { geom: ConvGeom },
    MaxPool { argmax: Vec<u32> },
    BatchNorm { saved: BnSaved, batch_stats: bool },
    Relu,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    L2Norm { norms: Vec<f32>, eps: f32 },
    Reshape,
    ToNhwc,
    GatherRows { rows: Vec<usize> },
    SmoothL1 { target: Vec<f32> },
    SoftmaxCe { labels: Vec<usize>, probs: Vec<f32> },
    Sum,
    Add,
    Scale(f32),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::L2Norm { .. } => "l2_normalize_scale",
            Op::Reshape => "reshape",
            Op::ToNhwc => "to_nhwc",
            Op::GatherRows { .. } => "gather_rows",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Sum => "sum",
            Op::Add => "add",
            Op::Scale(_) => "scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize by batch statistics and fold them into the running averages.
    Train { momentum: f32 },
    /// Normalize by running statistics, leaving them untouched.
    Infer,
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const L2_EPS: f32 = 1e-10;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn shape_err(op: &str, msg: String) -> Error {
    Error::config(format!("{op}: {msg}"))
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

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, inputs, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` root with respect to `v`, for leaves that require it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err("conv2d", format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cout)));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(Op::Conv2d { geom }, inputs, t))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), kernel, stride)?;
        let (out, argmax) = maxpool_forward(&geom, self.value(x).data());
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(Op::MaxPool { argmax }, vec![x], t))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState, mode: BnMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("batchnorm", format!("expects 4-D input, got {shape:?}")));
        }
        let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(shape_err("batchnorm", format!("{what} shape {:?}, expected [{channels}]", self.shape(v))));
            }
        }
        if state.running_mean.len() != channels {
            return Err(shape_err("batchnorm", format!("running stats hold {} channels, input has {channels}", state.running_mean.len())));
        }
        let (saved, batch_stats) = match mode {
            BnMode::Train { momentum } => {
                let (mean, var) = channel_stats(self.value(x).data(), batch, channels, plane);
                let count = (batch * plane) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..channels {
                    let rm = &mut state.running_mean[c];
                    *rm = (1.0 - momentum) * *rm + momentum * mean[c] as f32;
                    let rv = &mut state.running_var[c];
                    *rv = (1.0 - momentum) * *rv + momentum * (var[c] * unbias) as f32;
                }
                let saved = BnSaved {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    inv_std: var.iter().map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32).collect(),
                };
                (saved, true)
            }
            BnMode::Infer => {
                let saved = BnSaved {
                    mean: state.running_mean.clone(),
                    inv_std: state.running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                };
                (saved, false)
            }
        };
        let y = bn_apply(
            self.value(x).data(),
            batch,
            channels,
            plane,
            &saved,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(&shape, y)?;
        Ok(self.push(Op::BatchNorm { saved, batch_stats }, vec![x, gamma, beta], t))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        self.push(Op::Relu, vec![x], t)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(shape_err("concat", format!("rank mismatch {s:?} vs {base:?}")));
            }
            for (d, (&a, &b)) in s.iter().zip(&base).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err("concat", format!("dimension {d} mismatch: {a} vs {b}")));
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), t))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Narrow { axis, start }, vec![x], t))
    }

    /// Divides each channel vector by its norm and multiplies by the per-channel `scale`.
    pub fn l2_normalize_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("l2_normalize_scale", format!("expects 4-D input, got {shape:?}")));
        }
        if self.shape(scale) != [shape[1]] {
            return Err(shape_err("l2_normalize_scale", format!("scale shape {:?}, expected [{}]", self.shape(scale), shape[1])));
        }
        let (y, norms) = l2norm_forward(
            self.value(x).data(),
            shape[0],
            shape[1],
            shape[2] * shape[3],
            self.value(scale).data(),
            L2_EPS,
        );
        let t = Tensor::new(&shape, y)?;
        Ok(self.push(Op::L2Norm { norms, eps: L2_EPS }, vec![x, scale], t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], t))
    }

    /// `[B, C, H, W]` to `[B, H·W·C]` with channels fastest.
    pub fn to_nhwc(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("to_nhwc", format!("expects 4-D input, got {shape:?}")));
        }
        let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0f32; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let s = &src[(bi * c + ci) * plane..][..plane];
                for (p, &v) in s.iter().enumerate() {
                    data[bi * c * plane + p * c + ci] = v;
                }
            }
        }
        let t = Tensor::new(&[b, plane * c], data)?;
        Ok(self.push(Op::ToNhwc, vec![x], t))
    }

    /// Picks rows of a 2-D tensor; repeated rows are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", format!("expects 2-D input, got {shape:?}")));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "empty row selection".into()));
        }
        let k = shape[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= shape[0] {
                return Err(shape_err("gather_rows", format!("row {r} out of range for {} rows", shape[0])));
            }
            data.extend_from_slice(&src[r * k..(r + 1) * k]);
        }
        let t = Tensor::new(&[rows.len(), k], data)?;
        Ok(self.push(Op::GatherRows { rows: rows.to_vec() }, vec![x], t))
    }

    /// Σ smooth-L1(pred − target): `0.5·d²` when `|d| < 1`, else `|d| − 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(shape_err("smooth_l1", format!("{} predictions vs {} targets", p.len(), target.len())));
        }
        let mut s = 0.0f64;
        for (&a, &b) in p.iter().zip(target) {
            s += smooth_l1_value(a - b) as f64;
        }
        Ok(self.push(Op::SmoothL1 { target: target.to_vec() }, vec![pred], Tensor::scalar(s as f32)))
    }

    /// Σ over rows of `−log softmax(logits)[label]` for `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("softmax_cross_entropy", format!("expects [N, K] logits, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::data(format!("label {l} at row {row} outside [0, {k})")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += (lse - row[labels[r]]) as f64;
        }
        Ok(self.push(Op::SoftmaxCe { labels: labels.to_vec(), probs }, vec![logits], Tensor::scalar(total as f32)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s as f32))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Add, vec![a, b], t))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| a * factor).collect()).expect("same shape");
        self.push(Op::Scale(factor), vec![x], t)
    }

    /// Reverse pass from a scalar root; gradients land on every leaf that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_from(root, vec![1.0])
    }

    /// Reverse pass seeded with an arbitrary output gradient of the root's extent.
    pub fn backward_from(&mut self, root: Var, seed: Vec<f32>) -> Result<()> {
        self.backward_onto(root, seed, Vec::new())
    }

    /// Reverse pass whose leaf gradients start from `initial` instead of zero.
    ///
    /// Batch-reducing parameter gradients are added onto the running value one image at a
    /// time, so continuing a batch across several passes gives the same bits as one pass.
    pub fn backward_onto(&mut self, root: Var, seed: Vec<f32>, initial: Vec<(Var, Vec<f32>)>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::Usage(format!(
                "seed gradient has {} elements, root has {}",
                seed.len(),
                self.value(root).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        for (v, g) in initial {
            if !matches!(self.nodes[v.0].op, Op::Leaf) || g.len() != self.value(v).len() {
                return Err(Error::Usage(format!("initial gradient for node {} must match a leaf", v.0)));
            }
            grads[v.0] = Some(g);
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            let mut parts = Vec::new();
            let contributions = self.local_backward(node, &gout, &wants, &mut parts);
            for (v, g) in contributions {
                accumulate(&mut grads[v.0], g);
            }
            for (v, ps) in parts {
                for g in ps {
                    accumulate(&mut grads[v.0], g);
                }
            }
        }
        // keep only leaf gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Input gradients of one node. Parameter gradients that reduce over the batch go to
    /// `parts` as one partial per image, in batch order.
    fn local_backward(
        &self,
        node: &Node,
        gout: &[f32],
        wants: &dyn Fn(Var) -> bool,
        parts: &mut Vec<(Var, Vec<Vec<f32>>)>,
    ) -> Vec<(Var, Vec<f32>)> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { geom } => {
                let g = conv2d_backward(geom, inp(0).data(), inp(1).data(), gout, wants(node.inputs[0]));
                if let Some(dx) = g.dx {
                    out.push((node.inputs[0], dx));
                }
                parts.push((node.inputs[1], g.dweight_parts));
                if node.inputs.len() > 2 {
                    parts.push((node.inputs[2], g.dbias_parts));
                }
            }
            Op::MaxPool { argmax } => {
                out.push((node.inputs[0], maxpool_backward(inp(0).len(), argmax, gout)));
            }
            Op::BatchNorm { saved, batch_stats } => {
                let s = inp(0).shape();
                let (dx, dgamma, dbeta) = bn_backward(
                    inp(0).data(),
                    gout,
                    s[0],
                    s[1],
                    s[2] * s[3],
                    saved,
                    inp(1).data(),
                    *batch_stats,
                );
                out.push((node.inputs[0], dx));
                parts.push((node.inputs[1], dgamma));
                parts.push((node.inputs[2], dbeta));
            }
            Op::Relu => {
                let dx = inp(0).data().iter().zip(gout).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                out.push((node.inputs[0], dx));
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in &node.inputs {
                    let block = self.nodes[v.0].value.shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        g.extend_from_slice(&gout[o * total + offset..o * total + offset + block]);
                    }
                    offset += block;
                    out.push((v, g));
                }
            }
            Op::Narrow { axis, start } => {
                let in_shape = inp(0).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0f32; inp(0).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((node.inputs[0], g));
            }
            Op::L2Norm { norms, eps } => {
                let s = inp(0).shape();
                let (dx, dscale) =
                    l2norm_backward(inp(0).data(), gout, norms, s[0], s[1], s[2] * s[3], inp(1).data(), *eps);
                out.push((node.inputs[0], dx));
                parts.push((node.inputs[1], dscale));
            }
            Op::Reshape | Op::Scale(_) | Op::Add => {
                let factor = if let Op::Scale(f) = node.op { f } else { 1.0 };
                for &v in &node.inputs {
                    out.push((v, gout.iter().map(|&g| g * factor).collect()));
                }
            }
            Op::ToNhwc => {
                let s = inp(0).shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut g = vec![0.0f32; inp(0).len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..plane {
                            g[(bi * c + ci) * plane + p] = gout[bi * c * plane + p * c + ci];
                        }
                    }
                }
                out.push((node.inputs[0], g));
            }
            Op::GatherRows { rows } => {
                let k = inp(0).shape()[1];
                let mut g = vec![0.0f32; inp(0).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..k {
                        g[r * k + j] += gout[i * k + j];
                    }
                }
                out.push((node.inputs[0], g));
            }
            Op::SmoothL1 { target } => {
                let g0 = gout[0];
                let dx = inp(0)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| g0 * (p - t).clamp(-1.0, 1.0))
                    .collect();
                out.push((node.inputs[0], dx));
            }
            Op::SoftmaxCe { labels, probs } => {
                let g0 = gout[0];
                let k = inp(0).shape()[1];
                let mut dx: Vec<f32> = probs.iter().map(|&p| g0 * p).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= g0;
                }
                out.push((node.inputs[0], dx));
            }
            Op::Sum => {
                out.push((node.inputs[0], vec![gout[0]; inp(0).len()]));
            }
        }
        out.retain(|(v, _)| wants(*v));
        parts.retain(|(v, _)| wants(*v));
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

pub fn smooth_l1_value(d: f32) -> f32 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

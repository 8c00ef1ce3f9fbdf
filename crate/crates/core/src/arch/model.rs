use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{BnMode, BnState, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::build::{build_network, NetBuilder};
use super::spec::ArchSpec;
use super::trace::{shape_trace, ParamKind};

/// Executable detector: learnable tensors, batch-norm running statistics, and a forward pass.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchSpec,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    bn_names: Vec<String>,
    bn: Vec<BnState>,
    bn_index: HashMap<String, usize>,
    num_boxes: usize,
}

/// A finished forward pass. `loc` is `[B·N, 4]` and `conf` is `[B·N, K]`, rows ordered by
/// image, then scale, row, column and anchor.
pub struct ForwardOut {
    pub graph: Graph,
    pub loc: Var,
    pub conf: Var,
    leaves: Vec<(usize, Var)>,
}

impl Model {
    /// Allocates every tensor with the deterministic non-random initial values
    /// (zeros for conv kernels); call [`initialize`](Self::initialize) for training.
    pub fn new(spec: &ArchSpec) -> Result<Self> {
        let trace = shape_trace(spec)?;
        let mut m = Model {
            spec: spec.clone(),
            names: Vec::new(),
            kinds: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
            bn_index: HashMap::new(),
            num_boxes: 0,
        };
        for p in &trace.params {
            let value = match p.kind {
                ParamKind::BnGamma => 1.0,
                ParamKind::L2Scale => 20.0,
                _ => 0.0,
            };
            m.index.insert(p.name.clone(), m.params.len());
            m.names.push(p.name.clone());
            m.kinds.push(p.kind);
            m.params.push(Tensor::full(&p.shape, value).with_grad());
        }
        for (name, c) in &trace.batchnorms {
            m.bn_index.insert(name.clone(), m.bn.len());
            m.bn_names.push(name.clone());
            m.bn.push(BnState::new(*c));
        }
        m.num_boxes = (1..=spec.num_scales)
            .map(|s| {
                let r = trace.row(&format!("head{s}_loc")).expect("head row");
                r.h * r.w * spec.anchors_per_scale[s - 1]
            })
            .sum();
        Ok(m)
    }

    /// Xavier-uniform conv kernels `±√(6 / (fan_in + fan_out))`, zero biases, BN γ = 1 and
    /// β = 0, L2 scales 20, fresh running statistics.
    pub fn initialize(&mut self, seed: u64) {
        for (i, (t, kind)) in self.params.iter_mut().zip(&self.kinds).enumerate() {
            let fill = match *kind {
                ParamKind::ConvWeight { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let mut rng = rng_for(seed, &[0x696e_6974, i as u64]);
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
                    continue;
                }
                ParamKind::ConvBias | ParamKind::BnBeta => 0.0,
                ParamKind::BnGamma => 1.0,
                ParamKind::L2Scale => 20.0,
            };
            t.data_mut().fill(fill);
        }
        for s in &mut self.bn {
            *s = BnState::new(s.running_mean.len());
        }
        self.zero_grad();
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// Default boxes per image.
    pub fn num_boxes(&self) -> usize {
        self.num_boxes
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Runs the network on `[B, 3, S, S]` images. Batch-norm running statistics update in
    /// `Train` mode. With `with_grad` false no parameter receives a gradient.
    pub fn forward(&mut self, images: &Tensor, mode: BnMode, with_grad: bool) -> Result<ForwardOut> {
        let s = self.spec.input_size;
        if images.rank() != 4 || images.shape()[1..] != [3, s, s] {
            return Err(Error::config(format!("model expects [B, 3, {s}, {s}] images, got {:?}", images.shape())));
        }
        let batch = images.dim(0);
        let mut g = Graph::new();
        let input = g.leaf(Tensor::new(images.shape(), images.data().to_vec())?);
        let mut exec = Exec {
            g: &mut g,
            params: &self.params,
            index: &self.index,
            bn: &mut self.bn,
            bn_index: &self.bn_index,
            mode,
            with_grad,
            input: Some(input),
            leaves: Vec::new(),
        };
        let heads = build_network(&self.spec, &mut exec)?;
        let leaves = std::mem::take(&mut exec.leaves);
        let (loc, conf) = flatten_predictions(&mut g, &heads, self.spec.num_classes)?;
        debug_assert_eq!(g.shape(loc)[0], batch * self.num_boxes);
        Ok(ForwardOut { graph: g, loc, conf, leaves })
    }

    /// Back-propagates the scalar `root` of `out` and adds its gradients onto the parameters.
    ///
    /// Gradients continue from each parameter's current value image by image, so a batch split
    /// over several forward/backward passes accumulates exactly the same bits as one pass.
    pub fn backward(&mut self, out: &mut ForwardOut, root: Var) -> Result<()> {
        let initial = out
            .leaves
            .iter()
            .filter_map(|&(i, v)| self.params[i].grad().map(|g| (v, g.to_vec())))
            .collect();
        out.graph.backward_onto(root, vec![1.0], initial)?;
        for &(i, v) in &out.leaves {
            if let (Some(src), Some(dst)) = (out.graph.grad(v), self.params[i].grad_mut()) {
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    }

    /// Replaces a parameter's values, checking the shape.
    pub fn set_param(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
        if self.params[i].shape() != shape {
            return Err(Error::data(format!("parameter `{name}`: shape {shape:?}, model has {:?}", self.params[i].shape())));
        }
        self.params[i].data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn bn_index(&self, name: &str) -> Option<usize> {
        self.bn_index.get(name).copied()
    }
}

/// Flattens per-scale `[B, 4a, H, W]` / `[B, Ka, H, W]` maps into `[B·N, 4]` and `[B·N, K]`
/// rows ordered by image, scale, row, column, anchor.
pub fn flatten_predictions(g: &mut Graph, heads: &[(Var, Var)], num_classes: usize) -> Result<(Var, Var)> {
    let mut locs = Vec::with_capacity(heads.len());
    let mut confs = Vec::with_capacity(heads.len());
    for &(l, c) in heads {
        locs.push(g.to_nhwc(l)?);
        confs.push(g.to_nhwc(c)?);
    }
    let loc = g.concat(&locs, 1)?;
    let n = g.value(loc).len() / 4;
    let loc = g.reshape(loc, &[n, 4])?;
    let conf = g.concat(&confs, 1)?;
    let conf = g.reshape(conf, &[n, num_classes])?;
    Ok((loc, conf))
}

struct Exec<'a> {
    g: &'a mut Graph,
    params: &'a [Tensor],
    index: &'a HashMap<String, usize>,
    bn: &'a mut [BnState],
    bn_index: &'a HashMap<String, usize>,
    mode: BnMode,
    with_grad: bool,
    input: Option<Var>,
    leaves: Vec<(usize, Var)>,
}

impl Exec<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        let &i = self.index.get(name).ok_or_else(|| Error::config(format!("no parameter `{name}`")))?;
        let src = &self.params[i];
        let t = Tensor::new(src.shape(), src.data().to_vec())?;
        let v = self.g.leaf(if self.with_grad { t.with_grad() } else { t });
        self.leaves.push((i, v));
        Ok(v)
    }
}

impl NetBuilder for Exec<'_> {
    type Feat = Var;

    fn input(&mut self) -> Result<Var> {
        self.input.take().ok_or_else(|| Error::Usage("network input requested twice".into()))
    }

    fn conv(&mut self, name: &str, x: &Var, _cout: usize, _k: usize, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = if bias { Some(self.param(&format!("{name}.bias"))?) } else { None };
        self.g.conv2d(*x, w, b, stride, pad)
    }

    fn bn_relu(&mut self, name: &str, x: &Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let &i = self.bn_index.get(name).ok_or_else(|| Error::config(format!("no batch norm `{name}`")))?;
        let y = self.g.batchnorm(*x, gamma, beta, &mut self.bn[i], self.mode)?;
        Ok(self.g.relu(y))
    }

    fn maxpool(&mut self, x: &Var, k: usize, s: usize) -> Result<Var> {
        self.g.maxpool2d(*x, k, s)
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.g.concat(xs, 1)
    }

    fn l2norm(&mut self, name: &str, x: &Var) -> Result<Var> {
        let s = self.param(&format!("{name}.scale"))?;
        self.g.l2_normalize_scale(*x, s)
    }

    fn dims(&self, x: &Var) -> (usize, usize, usize) {
        let s = self.g.shape(*x);
        (s[1], s[2], s[3])
    }

    fn mark(&mut self, _row: &str, _x: &Var) {}
}

//! The single description of the network, written against [`NetBuilder`].
//!
//! The shape tracer and the executable model both implement the trait, so the trace, the
//! parameter list and the computation can never disagree.

use crate::error::{Error, Result};

use super::spec::{ArchSpec, PredictionStyle};

pub trait NetBuilder {
    type Feat: Clone;

    fn input(&mut self) -> Result<Self::Feat>;
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, x: &Self::Feat, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool)
        -> Result<Self::Feat>;
    /// Batch norm followed by ReLU; parameters live under `name`.
    fn bn_relu(&mut self, name: &str, x: &Self::Feat) -> Result<Self::Feat>;
    fn maxpool(&mut self, x: &Self::Feat, kernel: usize, stride: usize) -> Result<Self::Feat>;
    fn concat(&mut self, xs: &[Self::Feat]) -> Result<Self::Feat>;
    fn l2norm(&mut self, name: &str, x: &Self::Feat) -> Result<Self::Feat>;
    /// `(channels, height, width)` of a feature map.
    fn dims(&self, x: &Self::Feat) -> (usize, usize, usize);
    /// Closes a named trace row ending at `x`.
    fn mark(&mut self, row: &str, x: &Self::Feat);
}

/// Per-scale `(loc map, conf map)` pairs in scale order.
pub type Heads<F> = Vec<(F, F)>;

/// Down-sampling geometry from extent `e` to the next scale.
fn reduction(e: usize, scale: usize) -> Result<(usize, usize, usize)> {
    match e {
        0 | 1 => Err(Error::config(format!("scale {scale}: spatial extent already {e}, cannot add another scale"))),
        // 3 -> 1 needs an unpadded 3x3 conv and a 3x3/3 pool; stride 2 would give 2
        3 => Ok((3, 1, 0)),
        _ => Ok((3, 2, 1)),
    }
}

fn pool_for(e: usize) -> (usize, usize) {
    if e == 3 {
        (3, 3)
    } else {
        (2, 2)
    }
}

fn conv_bn_relu<N: NetBuilder>(n: &mut N, name: &str, x: &N::Feat, cout: usize, k: usize, s: usize, p: usize) -> Result<N::Feat> {
    let y = n.conv(&format!("{name}.conv"), x, cout, k, s, p, false)?;
    n.bn_relu(&format!("{name}.bn"), &y)
}

/// BN, ReLU, then a bias-free conv.
fn bn_relu_conv<N: NetBuilder>(n: &mut N, name: &str, x: &N::Feat, cout: usize, k: usize, s: usize, p: usize) -> Result<N::Feat> {
    let y = n.bn_relu(&format!("{name}.bn"), x)?;
    n.conv(&format!("{name}.conv"), &y, cout, k, s, p, false)
}

fn stem<N: NetBuilder>(spec: &ArchSpec, n: &mut N, x: &N::Feat) -> Result<N::Feat> {
    let a = spec.first_conv_channels;
    if spec.use_stem {
        let x = conv_bn_relu(n, "stem.1", x, a, 3, 2, 1)?;
        n.mark("stem_conv1", &x);
        let x = conv_bn_relu(n, "stem.2", &x, a, 3, 1, 1)?;
        n.mark("stem_conv2", &x);
        let x = conv_bn_relu(n, "stem.3", &x, 2 * a, 3, 1, 1)?;
        n.mark("stem_conv3", &x);
        let x = n.maxpool(&x, 2, 2)?;
        n.mark("stem_pool", &x);
        Ok(x)
    } else {
        let x = conv_bn_relu(n, "init", x, 2 * a, 7, 2, 3)?;
        n.mark("init_conv", &x);
        let x = n.maxpool(&x, 3, 2)?;
        n.mark("init_pool", &x);
        Ok(x)
    }
}

fn dense_block<N: NetBuilder>(spec: &ArchSpec, n: &mut N, index: usize, layers: usize, x: &N::Feat) -> Result<N::Feat> {
    let mut cur = x.clone();
    for l in 1..=layers {
        let name = format!("block{index}.layer{l}");
        let h = bn_relu_conv(n, &format!("{name}.1"), &cur, spec.bottleneck_channels, 1, 1, 0)?;
        let h = bn_relu_conv(n, &format!("{name}.2"), &h, spec.growth_rate, 3, 1, 1)?;
        cur = n.concat(&[cur, h])?;
    }
    n.mark(&format!("dense_block{index}"), &cur);
    Ok(cur)
}

fn compressed<N: NetBuilder>(spec: &ArchSpec, n: &N, x: &N::Feat, where_: &str) -> Result<usize> {
    let c = n.dims(x).0;
    match spec.compression.apply(c) {
        0 => Err(Error::config(format!("{where_}: floor({} · {c}) = 0 channels", spec.compression))),
        out => Ok(out),
    }
}

/// Builds backbone, prediction layers and heads. Returns per-scale `(loc, conf)` maps.
pub fn build_network<N: NetBuilder>(spec: &ArchSpec, n: &mut N) -> Result<Heads<N::Feat>> {
    spec.validate()?;
    let input = n.input()?;
    let mut x = stem(spec, n, &input)?;
    let blocks = spec.block_layers.len();
    let mut scale1 = None;
    let mut twp = 0;
    for (i, &layers) in spec.block_layers.iter().enumerate() {
        let b = i + 1;
        x = dense_block(spec, n, b, layers, &x)?;
        if b == blocks {
            break;
        }
        let c = compressed(spec, n, &x, &format!("transition after block {b}"))?;
        let t = bn_relu_conv(n, &format!("transition{b}"), &x, c, 1, 1, 0)?;
        if b <= 2 {
            n.mark(&format!("transition{b}_conv"), &t);
            if b == 2 {
                scale1 = Some(t.clone());
            }
            x = n.maxpool(&t, 2, 2)?;
            n.mark(&format!("transition{b}_pool"), &x);
        } else {
            twp += 1;
            n.mark(&format!("transition_wo_pool{twp}"), &t);
            x = t;
        }
    }
    let scale1 = scale1.expect("validated block count");

    let mut scales = vec![scale1.clone()];
    match spec.prediction_style {
        PredictionStyle::Plain => {
            let c = compressed(spec, n, &x, "final transition")?;
            let t = bn_relu_conv(n, &format!("transition{blocks}"), &x, c, 1, 1, 0)?;
            n.mark(&format!("transition_wo_pool{}", twp + 1), &t);
            scales.push(t);
            for s in 3..=spec.num_scales {
                let w = spec.scale_channels[s - 2];
                let prev = scales.last().unwrap().clone();
                let (k, st, p) = reduction(n.dims(&prev).1, s)?;
                let h = bn_relu_conv(n, &format!("scale{s}.1"), &prev, w / 2, 1, 1, 0)?;
                n.mark(&format!("scale{s}_conv1x1"), &h);
                let y = bn_relu_conv(n, &format!("scale{s}.2"), &h, w, k, st, p)?;
                n.mark(&format!("scale{s}_conv3x3"), &y);
                scales.push(y);
            }
        }
        PredictionStyle::Dense => {
            for s in 2..=spec.num_scales {
                let half = spec.scale_channels[s - 2] / 2;
                let prev = scales.last().unwrap().clone();
                let learned = if s == 2 {
                    let l = bn_relu_conv(n, "scale2.learned", &x, half, 1, 1, 0)?;
                    n.mark("scale2_learned_conv1x1", &l);
                    l
                } else {
                    let (k, st, p) = reduction(n.dims(&prev).1, s)?;
                    let h = bn_relu_conv(n, &format!("scale{s}.learned.1"), &prev, half, 1, 1, 0)?;
                    n.mark(&format!("scale{s}_learned_conv1x1"), &h);
                    let l = bn_relu_conv(n, &format!("scale{s}.learned.2"), &h, half, k, st, p)?;
                    n.mark(&format!("scale{s}_learned_conv3x3"), &l);
                    l
                };
                let e = n.dims(&prev).1;
                if e <= 1 {
                    return Err(Error::config(format!("scale {s}: spatial extent already {e}, cannot add another scale")));
                }
                let (pk, ps) = pool_for(e);
                let d = n.maxpool(&prev, pk, ps)?;
                n.mark(&format!("scale{s}_down_pool"), &d);
                let d = bn_relu_conv(n, &format!("scale{s}.down"), &d, half, 1, 1, 0)?;
                n.mark(&format!("scale{s}_down_conv1x1"), &d);
                if n.dims(&learned).1 != n.dims(&d).1 || n.dims(&learned).2 != n.dims(&d).2 {
                    return Err(Error::config(format!("scale {s}: learned and down-sampled halves differ in extent")));
                }
                let y = n.concat(&[learned, d])?;
                n.mark(&format!("scale{s}_concat"), &y);
                scales.push(y);
            }
        }
    }

    let mut heads = Vec::with_capacity(scales.len());
    for (i, f) in scales.iter().enumerate() {
        let s = i + 1;
        let a = spec.anchors_per_scale[i];
        let l = n.l2norm(&format!("head{s}.l2norm"), f)?;
        n.mark(&format!("head{s}_l2norm"), &l);
        let loc = n.conv(&format!("head{s}.loc"), &l, 4 * a, 3, 1, 1, true)?;
        n.mark(&format!("head{s}_loc"), &loc);
        let conf = n.conv(&format!("head{s}.conf"), &l, spec.num_classes * a, 3, 1, 1, true)?;
        n.mark(&format!("head{s}_conf"), &conf);
        heads.push((loc, conf));
    }
    Ok(heads)
}

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels::{conv_out_extent, pool_out_extent};

use super::build::{build_network, NetBuilder};
use super::spec::{ArchSpec, PredictionStyle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernel with its fan-in and fan-out (`channels × kernel area`).
    ConvWeight { fan_in: usize, fan_out: usize },
    ConvBias,
    BnGamma,
    BnBeta,
    L2Scale,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub name: String,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub params: usize,
}

/// Ordered layer records plus every learnable tensor and batch-norm layer they own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub rows: Vec<TraceRow>,
    pub params: Vec<ParamSpec>,
    /// Batch-norm layer names with their channel counts.
    pub batchnorms: Vec<(String, usize)>,
}

impl LayerTrace {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn row(&self, name: &str) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `name,channels,h,w,params` rows followed by `total_params,<n>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,channels,h,w,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.channels, r.h, r.w, r.params);
        }
        let _ = writeln!(s, "total_params,{}", self.total_params());
        s
    }
}

#[derive(Default)]
struct Tracer {
    input: usize,
    trace: Vec<TraceRow>,
    params: Vec<ParamSpec>,
    batchnorms: Vec<(String, usize)>,
    pending: usize,
}

type Dims = (usize, usize, usize);

impl Tracer {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.pending += shape.iter().product::<usize>();
        self.params.push(ParamSpec { name, shape, kind });
    }
}

impl NetBuilder for Tracer {
    type Feat = Dims;

    fn input(&mut self) -> Result<Dims> {
        Ok((3, self.input, self.input))
    }

    fn conv(&mut self, name: &str, x: &Dims, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Dims> {
        let ext = |e| {
            conv_out_extent(e, k, stride, pad)
                .ok_or_else(|| Error::config(format!("{name}: {k}x{k} kernel does not fit extent {e} with padding {pad}")))
        };
        let (h, w) = (ext(x.1)?, ext(x.2)?);
        let kind = ParamKind::ConvWeight { fan_in: x.0 * k * k, fan_out: cout * k * k };
        self.add(format!("{name}.weight"), vec![cout, x.0, k, k], kind);
        if bias {
            self.add(format!("{name}.bias"), vec![cout], ParamKind::ConvBias);
        }
        Ok((cout, h, w))
    }

    fn bn_relu(&mut self, name: &str, x: &Dims) -> Result<Dims> {
        self.add(format!("{name}.gamma"), vec![x.0], ParamKind::BnGamma);
        self.add(format!("{name}.beta"), vec![x.0], ParamKind::BnBeta);
        self.batchnorms.push((name.to_string(), x.0));
        Ok(*x)
    }

    fn maxpool(&mut self, x: &Dims, k: usize, s: usize) -> Result<Dims> {
        let ext = |e| pool_out_extent(e, k, s).ok_or_else(|| Error::config(format!("{k}x{k} pool does not fit extent {e}")));
        Ok((x.0, ext(x.1)?, ext(x.2)?))
    }

    fn concat(&mut self, xs: &[Dims]) -> Result<Dims> {
        let (h, w) = (xs[0].1, xs[0].2);
        if xs.iter().any(|d| (d.1, d.2) != (h, w)) {
            return Err(Error::config(format!("concat of mismatched extents {xs:?}")));
        }
        Ok((xs.iter().map(|d| d.0).sum(), h, w))
    }

    fn l2norm(&mut self, name: &str, x: &Dims) -> Result<Dims> {
        self.add(format!("{name}.scale"), vec![x.0], ParamKind::L2Scale);
        Ok(*x)
    }

    fn dims(&self, x: &Dims) -> Dims {
        *x
    }

    fn mark(&mut self, row: &str, x: &Dims) {
        self.trace.push(TraceRow { name: row.to_string(), channels: x.0, h: x.1, w: x.2, params: self.pending });
        self.pending = 0;
    }
}

pub fn shape_trace(spec: &ArchSpec) -> Result<LayerTrace> {
    let mut t = Tracer { input: spec.input_size, ..Tracer::default() };
    build_network(spec, &mut t)?;
    debug_assert_eq!(t.pending, 0, "parameters outside any trace row");
    Ok(LayerTrace { rows: t.trace, params: t.params, batchnorms: t.batchnorms })
}

pub fn count_params(spec: &ArchSpec) -> Result<usize> {
    Ok(shape_trace(spec)?.total_params())
}

/// Extent of each prediction scale, in order. Fails where the network cannot be built.
pub fn scale_grids(spec: &ArchSpec) -> Result<Vec<usize>> {
    let t = shape_trace(spec)?;
    Ok((1..=spec.num_scales).map(|s| t.row(&format!("head{s}_loc")).expect("every scale has a head").h).collect())
}

/// Parameter count accumulated directly from the channel arithmetic, without building anything.
pub fn closed_form_params(spec: &ArchSpec) -> Result<usize> {
    spec.validate()?;
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k;
    let bn = |c: usize| 2 * c;
    let (a, b, k) = (spec.first_conv_channels, spec.bottleneck_channels, spec.growth_rate);
    let mut p = if spec.use_stem {
        conv(3, a, 3) + bn(a) + conv(a, a, 3) + bn(a) + conv(a, 2 * a, 3) + bn(2 * a)
    } else {
        conv(3, 2 * a, 7) + bn(2 * a)
    };
    let mut c = 2 * a;
    let mut s1 = 0;
    let n = spec.block_layers.len();
    for (i, &layers) in spec.block_layers.iter().enumerate() {
        // layer l sees c + l·k inputs
        p += layers * (bn(b) + conv(b, k, 3)) + (0..layers).map(|l| bn(c + l * k) + conv(c + l * k, b, 1)).sum::<usize>();
        c += layers * k;
        if i + 1 < n {
            let co = spec.compression.apply(c);
            p += bn(c) + conv(c, co, 1);
            c = co;
            if i == 1 {
                s1 = c;
            }
        }
    }
    let mut chans = vec![s1];
    match spec.prediction_style {
        PredictionStyle::Plain => {
            let co = spec.compression.apply(c);
            p += bn(c) + conv(c, co, 1);
            chans.push(co);
            for &w in &spec.scale_channels[1..] {
                let prev = *chans.last().unwrap();
                p += bn(prev) + conv(prev, w / 2, 1) + bn(w / 2) + conv(w / 2, w, 3);
                chans.push(w);
            }
        }
        PredictionStyle::Dense => {
            let h = spec.scale_channels[0] / 2;
            p += bn(c) + conv(c, h, 1) + bn(s1) + conv(s1, h, 1);
            chans.push(2 * h);
            for &w in &spec.scale_channels[1..] {
                let (prev, h) = (*chans.last().unwrap(), w / 2);
                p += 2 * (bn(prev) + conv(prev, h, 1)) + bn(h) + conv(h, h, 3);
                chans.push(w);
            }
        }
    }
    for (&ch, &an) in chans.iter().zip(&spec.anchors_per_scale) {
        p += ch + conv(ch, 4 * an, 3) + 4 * an + conv(ch, spec.num_classes * an, 3) + spec.num_classes * an;
    }
    Ok(p)
}

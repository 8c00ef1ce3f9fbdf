//! Finite-difference gradient verification.
//!
//! Each registered operator is checked on a small random instance. The analytic side runs the
//! `f32` operator and its backward pass with a random output cotangent `r`; the numeric side
//! differentiates `Σ r·op(x)` by central differences over a direct-loop `f64` reference of the
//! same operator, sharing no code with the kernels under test.
//!
//! The error for one element is `|a − n| / max(|a|, |n|, 1e-2)`; the floor keeps entries that
//! are zero up to `f32` noise from dominating the maximum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, BnState, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-2;

/// Operators with a finite-difference check.
pub const OPS: &[&str] = &[
    "identity",
    "conv2d",
    "conv2d_strided",
    "maxpool2d",
    "batchnorm",
    "batchnorm_infer",
    "relu",
    "concat",
    "narrow",
    "l2_normalize_scale",
    "smooth_l1",
    "softmax_cross_entropy",
    "gather_rows",
    "to_nhwc",
    "sum",
    "add",
    "scale",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Central differences of a scalar `f64` function.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
        })
        .fold(0.0, f64::max)
}

struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
    differentiable: bool,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    inputs: Vec<Input>,
    build: Build,
    reference: Reference,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero by `margin`.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Distinct values spaced 0.01 apart in random order, so no max window is ever near a tie.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn inp(shape: &[usize], data: Vec<f32>) -> Input {
    Input { shape: shape.to_vec(), data, differentiable: true }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = match op {
        "identity" => {
            let s = [2, 3];
            Case {
                inputs: vec![inp(&s, uniform(rng, 6, -1.0, 1.0))],
                build: Box::new(|g, v| g.reshape(v[0], &[6])),
                reference: Box::new(|x| x[0].clone()),
            }
        }
        "conv2d" | "conv2d_strided" => {
            let stride = if op == "conv2d" { 1 } else { 2 };
            let (xs, ws) = ([1, 2, 5, 5], [3, 2, 3, 3]);
            Case {
                inputs: vec![
                    inp(&xs, uniform(rng, numel(&xs), -1.0, 1.0)),
                    inp(&ws, uniform(rng, numel(&ws), -1.0, 1.0)),
                    inp(&[3], uniform(rng, 3, -1.0, 1.0)),
                ],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1)),
                reference: Box::new(move |x| reference::conv2d(&x[0], &xs, &x[1], &ws, Some(&x[2]), stride, 1)),
            }
        }
        "maxpool2d" => {
            let s = [2, 2, 5, 5];
            Case {
                inputs: vec![inp(&s, distinct(rng, numel(&s)))],
                build: Box::new(|g, v| g.maxpool2d(v[0], 2, 2)),
                reference: Box::new(move |x| reference::maxpool(&x[0], &s, 2, 2)),
            }
        }
        "batchnorm" | "batchnorm_infer" => {
            let s = [3, 2, 2, 2];
            let train = op == "batchnorm";
            let rm: Vec<f32> = uniform(rng, 2, -0.5, 0.5);
            let rv: Vec<f32> = uniform(rng, 2, 0.5, 2.0);
            let (rm2, rv2) = (rm.clone(), rv.clone());
            Case {
                inputs: vec![
                    inp(&s, uniform(rng, numel(&s), -1.0, 1.0)),
                    inp(&[2], uniform(rng, 2, 0.5, 1.5)),
                    inp(&[2], uniform(rng, 2, -0.5, 0.5)),
                ],
                build: Box::new(move |g, v| {
                    let mut st = BnState { running_mean: rm.clone(), running_var: rv.clone() };
                    let mode = if train { BnMode::Train { momentum: 0.1 } } else { BnMode::Infer };
                    g.batchnorm(v[0], v[1], v[2], &mut st, mode)
                }),
                reference: Box::new(move |x| {
                    if train {
                        reference::batchnorm_train(&x[0], &s, &x[1], &x[2])
                    } else {
                        let rm: Vec<f64> = rm2.iter().map(|&v| v as f64).collect();
                        let rv: Vec<f64> = rv2.iter().map(|&v| v as f64).collect();
                        reference::batchnorm_infer(&x[0], &s, &x[1], &x[2], &rm, &rv)
                    }
                }),
            }
        }
        "relu" => {
            let s = [2, 3, 2, 2];
            Case {
                inputs: vec![inp(&s, away_from_zero(rng, numel(&s), 0.05))],
                build: Box::new(|g, v| Ok(g.relu(v[0]))),
                reference: Box::new(|x| x[0].iter().map(|&v| v.max(0.0)).collect()),
            }
        }
        "concat" => {
            let (a, b) = ([2, 1, 2, 3], [2, 3, 2, 3]);
            Case {
                inputs: vec![inp(&a, uniform(rng, numel(&a), -1.0, 1.0)), inp(&b, uniform(rng, numel(&b), -1.0, 1.0))],
                build: Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
                reference: Box::new(move |x| reference::concat(&[(&x[0], &a), (&x[1], &b)], 1)),
            }
        }
        "narrow" => {
            let s = [2, 5, 3];
            Case {
                inputs: vec![inp(&s, uniform(rng, numel(&s), -1.0, 1.0))],
                build: Box::new(|g, v| g.narrow(v[0], 1, 1, 3)),
                reference: Box::new(move |x| reference::narrow(&x[0], &s, 1, 1, 3)),
            }
        }
        "l2_normalize_scale" => {
            let s = [2, 3, 2, 2];
            Case {
                inputs: vec![inp(&s, away_from_zero(rng, numel(&s), 0.1)), inp(&[3], uniform(rng, 3, 1.0, 3.0))],
                build: Box::new(|g, v| g.l2_normalize_scale(v[0], v[1])),
                reference: Box::new(move |x| reference::l2norm(&x[0], &s, &x[1], crate::autograd::L2_EPS as f64)),
            }
        }
        "smooth_l1" => {
            let n = 12;
            let target = uniform(rng, n, -1.0, 1.0);
            // differences on both branches, at least 0.05 away from the |d| = 1 seam
            let pred: Vec<f32> = target
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let mag = if i % 2 == 0 { rng.gen_range(0.0..0.95) } else { rng.gen_range(1.05..2.5) };
                    t + if rng.gen_bool(0.5) { mag } else { -mag }
                })
                .collect();
            let t2: Vec<f64> = target.iter().map(|&v| v as f64).collect();
            Case {
                inputs: vec![inp(&[n / 4, 4], pred)],
                build: Box::new(move |g, v| g.smooth_l1(v[0], &target)),
                reference: Box::new(move |x| vec![reference::smooth_l1(&x[0], &t2)]),
            }
        }
        "softmax_cross_entropy" => {
            let (n, k) = (4, 5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let l2 = labels.clone();
            Case {
                inputs: vec![inp(&[n, k], uniform(rng, n * k, -2.0, 2.0))],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
                reference: Box::new(move |x| vec![reference::softmax_ce(&x[0], k, &l2)]),
            }
        }
        "gather_rows" => {
            let (r, k) = (5, 3);
            let rows = vec![4, 0, 2, 0];
            let r2 = rows.clone();
            Case {
                inputs: vec![inp(&[r, k], uniform(rng, r * k, -1.0, 1.0))],
                build: Box::new(move |g, v| g.gather_rows(v[0], &rows)),
                reference: Box::new(move |x| r2.iter().flat_map(|&i| x[0][i * k..(i + 1) * k].to_vec()).collect()),
            }
        }
        "to_nhwc" => {
            let s = [2, 3, 2, 3];
            Case {
                inputs: vec![inp(&s, uniform(rng, numel(&s), -1.0, 1.0))],
                build: Box::new(|g, v| g.to_nhwc(v[0])),
                reference: Box::new(move |x| reference::to_nhwc(&x[0], &s)),
            }
        }
        "sum" => Case {
            inputs: vec![inp(&[3, 4], uniform(rng, 12, -1.0, 1.0))],
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
            reference: Box::new(|x| vec![x[0].iter().sum()]),
        },
        "add" => Case {
            inputs: vec![inp(&[2, 3], uniform(rng, 6, -1.0, 1.0)), inp(&[2, 3], uniform(rng, 6, -1.0, 1.0))],
            build: Box::new(|g, v| g.add(v[0], v[1])),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        },
        "scale" => Case {
            inputs: vec![inp(&[7], uniform(rng, 7, -1.0, 1.0))],
            build: Box::new(|g, v| Ok(g.scale(v[0], -0.37))),
            reference: Box::new(|x| x[0].iter().map(|&a| a * -0.37f32 as f64).collect()),
        },
        other => return Err(Error::Usage(format!("unknown op '{other}' (known: {})", OPS.join(", ")))),
    };
    Ok(c)
}

/// Runs the finite-difference oracle for one operator. Deterministic given `seed`.
pub fn grad_check(op: &str, seed: u64) -> Result<GradCheckReport> {
    let op_index = OPS.iter().position(|&o| o == op).unwrap_or(usize::MAX) as u64;
    let mut rng = rng_for(seed, &[0x6772_6164, op_index]);
    let case = case(op, &mut rng)?;

    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|i| {
            let t = Tensor::new(&i.shape, i.data.clone()).expect("valid case");
            g.leaf(if i.differentiable { t.with_grad() } else { t })
        })
        .collect();
    let out = (case.build)(&mut g, &vars)?;
    let cot: Vec<f32> = uniform(&mut rng, g.value(out).len(), -1.0, 1.0);
    g.backward_from(out, cot.clone())?;

    let base: Vec<Vec<f64>> = case.inputs.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    let cot64: Vec<f64> = cot.iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    let mut elements = 0;
    for (k, input) in case.inputs.iter().enumerate() {
        if !input.differentiable {
            continue;
        }
        let objective = |xk: &[f64]| {
            let mut xs = base.clone();
            xs[k] = xk.to_vec();
            let y = (case.reference)(&xs);
            y.iter().zip(&cot64).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = numeric_grad(&objective, &base[k], FD_STEP);
        let analytic = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; numeric.len()]);
        worst = worst.max(max_rel_error(&analytic, &numeric));
        elements += numeric.len();
    }
    Ok(GradCheckReport { op: op.to_string(), seed, max_rel_error: worst, elements })
}

/// Direct-loop `f64` forward references used only by the oracle.
pub mod reference {
    pub fn conv2d(x: &[f64], xs: &[usize; 4], w: &[f64], ws: &[usize; 4], b: Option<&[f64]>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = *xs;
        let [co, _, kh, kw] = *ws;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for bi in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = b.map_or(0.0, |b| b[o]);
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                        continue;
                                    }
                                    s += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        out
    }

    pub fn maxpool(x: &[f64], s: &[usize; 4], k: usize, stride: usize) -> Vec<f64> {
        let [n, c, h, w] = *s;
        let ho = (h - k).div_ceil(stride) + 1;
        let wo = (w - k).div_ceil(stride) + 1;
        let mut out = Vec::new();
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for i in y * stride..(y * stride + k).min(h) {
                        for j in xx * stride..(xx * stride + k).min(w) {
                            m = m.max(x[(p * h + i) * w + j]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    pub fn batchnorm_train(x: &[f64], s: &[usize; 4], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let [n, c, h, w] = *s;
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for ci in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|b| (0..plane).map(move |p| (b * c + ci) * plane + p)).collect();
            let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
            let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                out[i] = gamma[ci] * (x[i] - m) / (v + 1e-5).sqrt() + beta[ci];
            }
        }
        out
    }

    pub fn batchnorm_infer(x: &[f64], s: &[usize; 4], gamma: &[f64], beta: &[f64], rm: &[f64], rv: &[f64]) -> Vec<f64> {
        let [_, c, h, w] = *s;
        let plane = h * w;
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / plane) % c;
                gamma[ci] * (v - rm[ci]) / (rv[ci] + 1e-5).sqrt() + beta[ci]
            })
            .collect()
    }

    pub fn concat(parts: &[(&[f64], &[usize; 4])], axis: usize) -> Vec<f64> {
        let outer: usize = parts[0].1[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for (data, shape) in parts {
                let block: usize = shape[axis..].iter().product();
                out.extend_from_slice(&data[o * block..(o + 1) * block]);
            }
        }
        out
    }

    pub fn narrow(x: &[f64], s: &[usize; 3], axis: usize, start: usize, len: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let idx = [i, j, k];
                    if idx[axis] >= start && idx[axis] < start + len {
                        out.push(x[(i * s[1] + j) * s[2] + k]);
                    }
                }
            }
        }
        out
    }

    pub fn l2norm(x: &[f64], s: &[usize; 4], scale: &[f64], eps: f64) -> Vec<f64> {
        let [n, c, h, w] = *s;
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let norm = (0..c).map(|ci| x[(b * c + ci) * plane + p].powi(2)).sum::<f64>().sqrt();
                for ci in 0..c {
                    let i = (b * c + ci) * plane + p;
                    out[i] = scale[ci] * x[i] / (norm + eps);
                }
            }
        }
        out
    }

    pub fn smooth_l1(pred: &[f64], target: &[f64]) -> f64 {
        pred.iter()
            .zip(target)
            .map(|(p, t)| {
                let d = p - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum()
    }

    pub fn softmax_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &logits[r * k..(r + 1) * k];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum()
    }

    pub fn to_nhwc(x: &[f64], s: &[usize; 4]) -> Vec<f64> {
        let [n, c, h, w] = *s;
        let mut out = Vec::new();
        for b in 0..n {
            for p in 0..h * w {
                for ci in 0..c {
                    out.push(x[(b * c + ci) * h * w + p]);
                }
            }
        }
        out
    }
}

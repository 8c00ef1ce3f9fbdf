//! 2-D cross-correlation via im2col + GEMM, batched over images.

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// `floor((extent + 2·pad − kernel)/stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || extent + 2 * pad < kernel {
        return None;
    }
    Some((extent + 2 * pad - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects 4-D input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin {
            return Err(Error::config(format!(
                "conv2d input channels: weight expects {wcin}, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let ho = conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            Error::config(format!("conv2d height: kernel {kh} exceeds padded height {}", h + 2 * pad))
        })?;
        let wo = conv_out_extent(w, kw, stride, pad).ok_or_else(|| {
            Error::config(format!("conv2d width: kernel {kw} exceeds padded width {}", w + 2 * pad))
        })?;
        Ok(ConvGeom { batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let per_out = g.cout * g.out_pixels();
    let per_in = g.cin * g.in_pixels();
    let mut out = vec![0.0f32; g.batch * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(b, ob)| {
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(g.out_pixels()).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        let xb = &x[b * per_in..(b + 1) * per_in];
        if g.pointwise() {
            gemm_nn(g.cout, g.out_pixels(), g.cin, weight, xb, ob);
        } else {
            let mut col = vec![0.0f32; g.col_rows() * g.out_pixels()];
            im2col(g, xb, &mut col);
            gemm_nn(g.cout, g.out_pixels(), g.col_rows(), weight, &col, ob);
        }
    });
    out
}

/// Gradients of a convolution. Parameter gradients are kept per image, in batch order.
pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dweight_parts: Vec<Vec<f32>>,
    pub dbias_parts: Vec<Vec<f32>>,
}

impl ConvGrads {
    pub fn dweight(&self) -> Vec<f32> {
        sum_parts(&self.dweight_parts)
    }

    pub fn dbias(&self) -> Vec<f32> {
        sum_parts(&self.dbias_parts)
    }
}

/// Adds per-image partial gradients in order.
pub fn sum_parts(parts: &[Vec<f32>]) -> Vec<f32> {
    let mut it = parts.iter();
    let mut acc = it.next().cloned().unwrap_or_default();
    for p in it {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc
}

pub fn conv2d_backward(g: &ConvGeom, x: &[f32], weight: &[f32], dout: &[f32], need_dx: bool) -> ConvGrads {
    let per_out = g.cout * g.out_pixels();
    let per_in = g.cin * g.in_pixels();
    let wlen = g.cout * g.col_rows();

    let partials: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * per_in..(b + 1) * per_in];
            let db = &dout[b * per_out..(b + 1) * per_out];
            let mut dw = vec![0.0f32; wlen];
            let dx = if g.pointwise() {
                gemm_nt(g.cout, g.cin, g.out_pixels(), db, xb, &mut dw);
                need_dx.then(|| {
                    let mut dxb = vec![0.0f32; per_in];
                    gemm_tn(g.cin, g.out_pixels(), g.cout, weight, db, &mut dxb);
                    dxb
                })
            } else {
                let mut col = vec![0.0f32; g.col_rows() * g.out_pixels()];
                im2col(g, xb, &mut col);
                gemm_nt(g.cout, g.col_rows(), g.out_pixels(), db, &col, &mut dw);
                need_dx.then(|| {
                    col.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(g.col_rows(), g.out_pixels(), g.cout, weight, db, &mut col);
                    let mut dxb = vec![0.0f32; per_in];
                    col2im(g, &col, &mut dxb);
                    dxb
                })
            };
            (dw, dx)
        })
        .collect();

    let mut dweight_parts = Vec::with_capacity(g.batch);
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * per_in));
    for (dw, dxb) in partials {
        dweight_parts.push(dw);
        if let (Some(dx), Some(dxb)) = (dx.as_mut(), dxb) {
            dx.extend_from_slice(&dxb);
        }
    }

    let dbias_parts = (0..g.batch)
        .map(|b| (0..g.cout).map(|co| dout[b * per_out + co * g.out_pixels()..][..g.out_pixels()].iter().sum::<f32>()).collect())
        .collect();
    ConvGrads { dx, dweight_parts, dbias_parts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = 0.0f64;
                        for c in 0..g.cin {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        let xv = x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize];
                                        let wv = w[((co * g.cin + c) * g.kh + i) * g.kw + j];
                                        s += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        for &(h, k, s, p) in &[(5, 3, 1, 1), (7, 3, 2, 1), (6, 1, 1, 0), (6, 1, 2, 0), (9, 7, 2, 3), (3, 3, 1, 0)] {
            let g = ConvGeom::new(&[2, 3, h, h + 1], &[4, 3, k, k], s, p).unwrap();
            let x: Vec<f32> = (0..2 * 3 * h * (h + 1)).map(|i| ((i * 37 % 11) as f32) / 7.0 - 0.6).collect();
            let w: Vec<f32> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f32) / 5.0 - 0.5).collect();
            let got = conv2d_forward(&g, &x, &w, None);
            let want = direct(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "h={h} k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn extent_formula() {
        assert_eq!(conv_out_extent(300, 3, 2, 1), Some(150));
        assert_eq!(conv_out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }
}

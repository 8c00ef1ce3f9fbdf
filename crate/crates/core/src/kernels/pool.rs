use crate::error::{Error, Result};

/// Ceil-mode pooled extent `ceil((extent − kernel)/stride) + 1`, windows clipped at the border.
pub fn pool_out_extent(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > extent {
        return None;
    }
    let out = (extent - kernel).div_ceil(stride) + 1;
    // the last window must start inside the input
    ((out - 1) * stride < extent).then_some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::config(format!("maxpool2d expects 4-D input, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let ho = pool_out_extent(h, kernel, stride)
            .ok_or_else(|| Error::config(format!("maxpool2d height: kernel {kernel}/stride {stride} invalid for extent {h}")))?;
        let wo = pool_out_extent(w, kernel, stride)
            .ok_or_else(|| Error::config(format!("maxpool2d width: kernel {kernel}/stride {stride} invalid for extent {w}")))?;
        Ok(PoolGeom { batch: shape[0], channels: shape[1], h, w, kernel, stride, ho, wo })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.ho, self.wo]
    }
}

/// Returns pooled values and, per output element, the flat input index of the maximum
/// (first occurrence in row-major window order).
pub fn maxpool_forward(g: &PoolGeom, x: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            let y0 = oy * g.stride;
            let y1 = (y0 + g.kernel).min(g.h);
            for ox in 0..g.wo {
                let x0 = ox * g.stride;
                let x1 = (x0 + g.kernel).min(g.w);
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + y0 * g.w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * g.w + xx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_len: usize, argmax: &[u32], dout: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (&i, &d) in argmax.iter().zip(dout) {
        dx[i as usize] += d;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_extents() {
        assert_eq!(pool_out_extent(75, 2, 2), Some(38));
        assert_eq!(pool_out_extent(38, 2, 2), Some(19));
        assert_eq!(pool_out_extent(19, 2, 2), Some(10));
        assert_eq!(pool_out_extent(150, 3, 2), Some(75));
        assert_eq!(pool_out_extent(3, 3, 3), Some(1));
        assert_eq!(pool_out_extent(1, 2, 2), None);
    }

    #[test]
    fn window_max() {
        let g = PoolGeom::new(&[1, 1, 2, 2], 2, 2).unwrap();
        let (out, arg) = maxpool_forward(&g, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }
}

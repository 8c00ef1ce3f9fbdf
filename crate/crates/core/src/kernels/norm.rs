//! Batch normalization and channel-wise L2 normalization on NCHW buffers.

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Batch mean and biased variance per channel, accumulated in f64 in a fixed order.
pub fn channel_stats(x: &[f32], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for b in 0..batch {
            s += x[(b * channels + c) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0f64;
        for b in 0..batch {
            q += x[(b * channels + c) * plane..][..plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / count;
    }
    (mean, var)
}

/// `y = gamma·(x − mean)·inv_std + beta`
pub fn bn_apply(
    x: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    saved: &BnSaved,
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let (m, s, g, bt) = (saved.mean[c], saved.inv_std[c], gamma[c], beta[c]);
            for (yo, &xi) in y[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *yo = g * ((xi - m) * s) + bt;
            }
        }
    }
    y
}

/// Gradients of batch norm: `(dx, dgamma, dbeta)` with the parameter gradients kept per image.
/// With `batch_stats` the statistics are treated as functions of `x`; otherwise they are
/// constants (running statistics).
pub fn bn_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    saved: &BnSaved,
    gamma: &[f32],
    batch_stats: bool,
) -> (Vec<f32>, Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let count = (batch * plane) as f32;
    let mut dgamma_parts = vec![vec![0.0f32; channels]; batch];
    let mut dbeta_parts = vec![vec![0.0f32; channels]; batch];
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for c in 0..channels {
        let (m, s) = (saved.mean[c], saved.inv_std[c]);
        let mut sdy = 0.0f64;
        let mut sdyx = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            let (mut pdy, mut pdyx) = (0.0f64, 0.0f64);
            for (&d, &xi) in dy[off..off + plane].iter().zip(&x[off..off + plane]) {
                pdy += d as f64;
                pdyx += d as f64 * ((xi - m) * s) as f64;
            }
            dbeta_parts[b][c] = pdy as f32;
            dgamma_parts[b][c] = pdyx as f32;
            sdy += pdy;
            sdyx += pdyx;
        }
        dbeta[c] = sdy as f32;
        dgamma[c] = sdyx as f32;
    }
    let mut dx = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let (m, s, g) = (saved.mean[c], saved.inv_std[c], gamma[c]);
            if batch_stats {
                let k = g * s / count;
                let (sdy, sdyx) = (dbeta[c], dgamma[c]);
                for ((o, &d), &xi) in dx[off..off + plane].iter_mut().zip(&dy[off..off + plane]).zip(&x[off..off + plane]) {
                    let xhat = (xi - m) * s;
                    *o = k * (count * d - sdy - xhat * sdyx);
                }
            } else {
                let k = g * s;
                for (o, &d) in dx[off..off + plane].iter_mut().zip(&dy[off..off + plane]) {
                    *o = k * d;
                }
            }
        }
    }
    (dx, dgamma_parts, dbeta_parts)
}

/// Channel-vector norms at every (b, h, w): returns `(y, norms)` with
/// `y[c] = scale[c] · x[c] / (‖x‖ + eps)`.
pub fn l2norm_forward(x: &[f32], batch: usize, channels: usize, plane: usize, scale: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut norms = vec![0.0f32; batch * plane];
    for b in 0..batch {
        let nb = &mut norms[b * plane..(b + 1) * plane];
        for c in 0..channels {
            let xs = &x[(b * channels + c) * plane..][..plane];
            for (n, &v) in nb.iter_mut().zip(xs) {
                *n += v * v;
            }
        }
        nb.iter_mut().for_each(|n| *n = n.sqrt());
    }
    let mut y = vec![0.0f32; x.len()];
    for b in 0..batch {
        let nb = &norms[b * plane..(b + 1) * plane];
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for ((o, &v), &n) in y[off..off + plane].iter_mut().zip(&x[off..off + plane]).zip(nb) {
                *o = scale[c] * (v / (n + eps));
            }
        }
    }
    (y, norms)
}

pub fn l2norm_backward(
    x: &[f32],
    dy: &[f32],
    norms: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    scale: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut dscale = vec![vec![0.0f32; channels]; batch];
    let mut dx = vec![0.0f32; x.len()];
    for b in 0..batch {
        let nb = &norms[b * plane..(b + 1) * plane];
        // Σ_c du_c·x_c per pixel, du = dy·scale
        let mut proj = vec![0.0f32; plane];
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let mut ds = 0.0f64;
            for (((p, &d), &v), &n) in proj.iter_mut().zip(&dy[off..off + plane]).zip(&x[off..off + plane]).zip(nb) {
                *p += d * scale[c] * v;
                ds += (d * (v / (n + eps))) as f64;
            }
            dscale[b][c] = ds as f32;
        }
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for ((((o, &d), &v), &n), &p) in dx[off..off + plane]
                .iter_mut()
                .zip(&dy[off..off + plane])
                .zip(&x[off..off + plane])
                .zip(nb)
                .zip(&proj)
            {
                let den = n + eps;
                let second = if n > 0.0 { v * p / (den * den * n) } else { 0.0 };
                *o = d * scale[c] / den - second;
            }
        }
    }
    (dx, dscale)
}

//! SGD with momentum and L2 weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    /// One zero-initialized velocity buffer per parameter, sized from `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f32, weight_decay: f32) -> Self {
        let velocity = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Sgd { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// `v ← momentum·v + (grad + weight_decay·param); param ← param − lr·v`
    ///
    /// Parameters without a gradient buffer are left alone.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f32) {
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            sgd_step(data, grad, v, lr, self.momentum, self.weight_decay);
        }
    }
}

/// Single-buffer form of the update rule.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[5.0, 7.0], &mut v, 0.0, 0.9, 0.0005);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![1.0f32];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_unrolls_to_one_point_nine() {
        // d1 = lr·g, d2 = lr·(0.9·g + g) = 1.9·lr·g
        let (lr, g) = (0.01f32, 2.0f32);
        let mut p = vec![0.0f32];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        let after1 = p[0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        let d2 = after1 - p[0];
        assert!((d2 - lr * g * 1.9).abs() < 1e-7);
    }

    #[test]
    fn optimizer_skips_params_without_grad() {
        let mut a = Tensor::full(&[2], 1.0).with_grad();
        a.accumulate_grad(&[1.0, 1.0]);
        let mut b = Tensor::full(&[1], 3.0);
        let mut opt = Sgd::new([&a, &b], 0.9, 0.0);
        opt.step([&mut a, &mut b], 0.5);
        assert_eq!(a.data(), &[0.5, 0.5]);
        assert_eq!(b.data(), &[3.0]);
    }
}

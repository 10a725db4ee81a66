use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::param::Param;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// matched to parameters by position.
#[derive(Debug)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; parameters untouched, gradients cleared.
    Skipped,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place and zeroes their gradients.
    pub fn step(&mut self, mut params: Vec<&mut Param<T>>) -> Result<StepOutcome> {
        if !params.iter().all(|p| p.grad.all_finite()) {
            for p in params.iter_mut() {
                p.zero_grad();
            }
            return Ok(StepOutcome::Skipped);
        }
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(Tensor::zeros(p.value.shape())?);
                self.v.push(Tensor::zeros(p.value.shape())?);
            }
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = &mut **p;
            for (((x, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let mn = beta1 * mi.as_f64() + (1.0 - beta1) * g;
                let vn = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *x = T::from_f64(x.as_f64() - update);
            }
            grad.fill(T::zero());
        }
        Ok(StepOutcome::Applied)
    }
}

/// Global L2 norm of all gradients, accumulated in `f64` in parameter order.
pub fn grad_norm<T: Element>(params: &[&Param<T>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.data())
        .fold(0.0, |a, &g| {
            let g = g.as_f64();
            a + g * g
        })
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(&params.iter().map(|p| &**p).collect::<Vec<_>>());
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::from_f64(g.as_f64() * scale));
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::full((1, 1, 1, 1), v).unwrap()).unwrap();
        p.grad.fill(g);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        assert_eq!(opt.step(vec![&mut p]).unwrap(), StepOutcome::Applied);
        assert!((p.value.data()[0] + 1e-3).abs() < 1e-9);
        assert_eq!(p.grad.data()[0], 0.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_that_counts() {
        let mut p = scalar(0.7, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn constant_gradient_keeps_descending() {
        let mut p = scalar(1.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..2 {
            p.grad.fill(1.0);
            opt.step(vec![&mut p]).unwrap();
            assert!(p.value.data()[0] < prev);
            prev = p.value.data()[0];
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = scalar(1.0, f64::INFINITY);
        let mut opt = Adam::new(AdamConfig::default());
        assert_eq!(opt.step(vec![&mut p]).unwrap(), StepOutcome::Skipped);
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(p.grad.data()[0], 0.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = scalar(0.0, 30.0);
        let mut b = scalar(0.0, 40.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 10.0);
        assert_eq!(before, 50.0);
        assert!(grad_norm(&[&a, &b]) <= 10.0 + 1e-6);
        let mut c = scalar(0.0, 3.0);
        clip_grad_norm(&mut [&mut c], 10.0);
        assert_eq!(c.grad.data()[0], 3.0);
    }
}

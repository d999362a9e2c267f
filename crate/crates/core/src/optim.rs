//! Adam with a linear warm-up / linear decay learning-rate schedule.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Linear warm-up to `lr_max` over `warmup_steps`, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(lr_max: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).max(1);
        Self {
            lr_max,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step + 1;
        if s <= self.warmup_steps {
            self.lr_max * s as f64 / self.warmup_steps as f64
        } else {
            let remaining = self.total_steps.saturating_sub(s) as f64 + 1.0;
            let span = (self.total_steps - self.warmup_steps.min(self.total_steps)) as f64 + 1.0;
            self.lr_max * remaining / span
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Matrix<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// One update; `grads[i]` of `None` leaves parameter `i` and its moments untouched.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Option<Matrix<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.step));
        let c2 = T::one() - T::of(self.beta2.powi(self.step));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params[i].as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for j in 0..p.len() {
                let gj = g.as_slice()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

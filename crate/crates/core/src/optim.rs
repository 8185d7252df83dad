//! Adam and the cosine annealing schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{CcsdError, Result};
use crate::tensor::{Scalar, Tensor};

/// `lr_min + (lr_0 - lr_min) * (1 + cos(pi * e / E)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr0: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) || !(lr_min >= 0.0 && lr_min <= lr0) || total_epochs == 0 {
            return Err(CcsdError::Config(format!(
                "cosine schedule needs lr0 > 0, 0 <= lr_min <= lr0 and epochs >= 1 (got {lr0}, {lr_min}, {total_epochs})"
            )));
        }
        Ok(Self {
            lr0,
            lr_min,
            total_epochs,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch == 0 {
            return self.lr0;
        }
        if epoch >= self.total_epochs {
            return self.lr_min;
        }
        let t = std::f64::consts::PI * epoch as f64 / self.total_epochs as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + t.cos())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(CcsdError::invalid(format!(
                "optimizer state for {} tensors, gradients for {}, parameters {}",
                self.m.len(),
                grads.grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(1e-2, 1e-5, 30).unwrap();
        assert_eq!(s.at(0), 1e-2);
        assert_eq!(s.at(30), 1e-5);
        assert_relative_eq!(s.at(15), 1e-5 + 0.5 * (1e-2 - 1e-5), max_relative = 1e-12);
        for e in 1..30 {
            assert!(s.at(e) < s.at(e - 1));
        }
        assert!(CosineSchedule::new(0.0, 0.0, 3).is_err());
        assert!(CosineSchedule::new(1e-3, 1e-2, 3).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::from_vec([1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let grads = Gradients {
            grads: vec![Tensor::from_vec([1, 1, 1, 1, 3], vec![0.3, -4.0, 1e-3]).unwrap()],
        };
        let mut opt = Adam::new(&ps);
        opt.update(&mut ps, &grads, 0.1).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let step = |g: f64| 0.1 * g / (g.abs() + 1e-8);
        let expect = [1.0 - step(0.3), -2.0 - step(-4.0), 0.5 - step(1e-3)];
        for (a, b) in ps.tensors()[0].data().iter().zip(expect) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_vec([1, 1, 1, 1, 2], vec![3.0, -1.5]).unwrap());
        let mut opt = Adam::new(&ps);
        for _ in 0..2000 {
            let g = ps.get(id).map(|x| 2.0 * (x - 0.5));
            opt.update(&mut ps, &Gradients { grads: vec![g] }, 0.01).unwrap();
        }
        for &x in ps.get(id).data() {
            assert!((x - 0.5).abs() < 1e-3, "{x}");
        }
    }
}

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive moment estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape(format!(
                    "tensor {i}: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi as f64 / c1;
                let v_hat = *vi as f64 / c2;
                *w -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.scale_in_place(c));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut params = vec![Tensor::zeros([4])];
        let mut adam = AdamState::new(cfg, &params);
        let g = Tensor::new([4], vec![3.0, -0.2, 7.0, 1e-3]).unwrap();
        adam.step(&mut params, std::slice::from_ref(&g)).unwrap();
        for (w, gi) in params[0].data().iter().zip(g.data()) {
            assert!((w.abs() - 0.01).abs() < 1e-4, "{w}");
            assert_eq!(w.signum(), -gi.signum());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut params = vec![Tensor::new([2], vec![5.0, 5.0]).unwrap()];
        let mut adam = AdamState::new(cfg, &params);
        for _ in 0..500 {
            // f(w) = |w|^2, grad = 2w
            let g = params[0].map(|w| 2.0 * w);
            adam.step(&mut params, &[g]).unwrap();
        }
        assert!(params[0].sq_norm().sqrt() < 0.1, "{:?}", params[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::zeros([2])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &[Tensor::zeros([3])]);
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-6);
    }
}

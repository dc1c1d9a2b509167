use super::error::{NumericsError, Result};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam coefficients. `beta1 = 0.95` is the momentum coefficient the policy
/// is trained with; the rest are conventional defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f64> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        Adam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update from the gradients currently held by `params`. Gradients are
    /// left in place; callers zero them. Parameters that received no gradient
    /// (experts nobody routed to) keep their values and moments.
    pub fn step(&mut self, params: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(NumericsError::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let grads: Vec<Option<Vec<S>>> = params.iter().map(Tensor::grad).collect();
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() {
                return Err(NumericsError::shape("adam_step", format!("parameter {i} changed size")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        let t = self.step as i32;
        let corr1 = S::one() - b1.powi(t);
        let corr2 = S::one() - b2.powi(t);
        for ((p, g), (m, v)) in params.iter().zip(&grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let Some(g) = g else { continue };
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                *mi = b1 * *mi + (S::one() - b1) * *gi;
                *vi = b2 * *vi + (S::one() - b2) * *gi * *gi;
            }
            p.update_data(|d| {
                for ((x, mi), vi) in d.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = *mi / corr1;
                    let vhat = *vi / corr2;
                    *x = *x - lr * mhat / (vhat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.first, &self.second)
    }

    /// Restores a saved state. Buffer shapes must match the current ones.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<S>>, second: Vec<Vec<S>>) -> Result<()> {
        let ok = first.len() == self.first.len()
            && second.len() == self.second.len()
            && first.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
            && second.iter().zip(&self.second).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(NumericsError::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}

pub fn zero_grads<S: Scalar>(params: &[Tensor<S>]) {
    params.iter().for_each(Tensor::zero_grad);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::param(&[v.len()], v.to_vec()).unwrap()
    }

    fn set_grad(p: &Tensor<f64>, g: f64) {
        p.zero_grad();
        p.scale(g).unwrap().sum().unwrap().backward().unwrap();
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        let p = param(&[0.0]);
        set_grad(&p, 1.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            std::slice::from_ref(&p),
        );
        adam.step(std::slice::from_ref(&p)).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = param(&[0.3, -1.2]);
        set_grad(&p, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        for _ in 0..5 {
            adam.step(std::slice::from_ref(&p)).unwrap();
        }
        assert_eq!(p.to_vec(), vec![0.3, -1.2]);
    }

    #[test]
    fn identical_parameters_follow_identical_paths() {
        let a = param(&[0.7]);
        let b = param(&[0.7]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &[a.clone(), b.clone()],
        );
        for k in 0..20 {
            let g = (k as f64 * 0.3).sin();
            set_grad(&a, g);
            set_grad(&b, g);
            adam.step(&[a.clone(), b.clone()]).unwrap();
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn parameters_without_gradient_are_skipped() {
        let p = param(&[1.0]);
        let q = param(&[2.0]);
        set_grad(&q, 1.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[p.clone(), q.clone()],
        );
        adam.step(&[p.clone(), q.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0]);
        assert!((q.data()[0] - 1.9).abs() < 1e-6);
    }
}

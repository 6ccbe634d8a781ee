//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to the parameters directly, not folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        })
    }

    /// One update of `params` in place.
    pub fn update(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Parameter(format!(
                "optimizer tracks {} values but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let t = self.step as i32;
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            let delta = lr * (m_hat / (v_hat.sqrt() + eps) + wd * params[i]);
            // Subtracting a zero could still flip the sign of a zero parameter.
            if delta != T::zero() {
                params[i] -= delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_frozen() {
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, 3).unwrap();
        let mut p = vec![1.5f64, -0.0, 1e-300];
        let before = p.clone();
        for _ in 0..10 {
            adam.update(&mut p, &[3.0, -2.0, 1e10]).unwrap();
        }
        assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn zero_gradient_without_decay_is_frozen() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, 2).unwrap();
        let mut p = vec![0.25f64, -4.0];
        adam.update(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.25, -4.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g), up to eps.
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, 2).unwrap();
        let mut p = vec![0.0f64, 0.0];
        adam.update(&mut p, &[5.0, -0.01]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        // A zero gradient still shrinks the parameter by lr * wd * p.
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut adam = Adam::new(cfg, 1).unwrap();
        let mut p = vec![2.0f64];
        adam.update(&mut p, &[0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Adam::<f64>::new(AdamConfig { lr: -1.0, ..Default::default() }, 1).is_err());
        assert!(Adam::<f64>::new(AdamConfig { beta2: 1.0, ..Default::default() }, 1).is_err());
        let mut a = Adam::<f64>::new(AdamConfig::default(), 2).unwrap();
        assert!(a.update(&mut [0.0], &[0.0, 0.0]).is_err());
    }
}

//! Adam with bias correction and an exponential learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter block {group}[{index}]")]
    NonFiniteGrad { group: String, index: usize },
    #[error("parameter block {group}: {msg}")]
    Shape { group: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub name: String,
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(name: impl Into<String>, params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            name: name.into(),
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update. `grads[i]` must have the same length as `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Shape {
                group: self.name.clone(),
                msg: format!(
                    "{} moment slots, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(OptimError::Shape {
                    group: self.name.clone(),
                    msg: format!("block {i}: {} params vs {} grads", p.numel(), g.len()),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad {
                    group: self.name.clone(),
                    index: i,
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Log-linear interpolation from `initial` at step 0 to `target` at `last`.
pub fn exp_decay(initial: f64, target: f64, step: u64, last: u64) -> f64 {
    if last == 0 {
        return target;
    }
    let t = (step.min(last)) as f64 / last as f64;
    initial.powf(1.0 - t) * target.powf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut opt = Adam::new("w", &p, AdamConfig::default());
        opt.step(&mut p, &[vec![0.5, 0.5]], 0.1).unwrap();
        let before = p.clone();
        let m_before = opt.m[0].clone();
        opt.step(&mut p, &[vec![0.0, 0.0]], 0.0).unwrap();
        assert_eq!(p, before);
        for (a, b) in opt.m[0].iter().zip(&m_before) {
            assert_eq!(*a, 0.9 * b);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut opt = Adam::new("w", &p, AdamConfig::default());
        opt.step(&mut p, &[vec![3.0, -0.01, 1e3]], 0.1).unwrap();
        let d = p[0].data();
        assert!((d[0] + 0.1).abs() < 1e-8);
        assert!((d[1] - 0.1).abs() < 1e-5);
        assert!((d[2] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn quadratic_converges() {
        // Independent scalar recurrence as the oracle.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new("x", &p, AdamConfig::default());
        for _ in 0..100 {
            let g = 2.0 * p[0].data()[0];
            opt.step(&mut p, &[vec![g]], 0.1).unwrap();
        }
        assert!((p[0].data()[0] - x).abs() < 1e-15);
        assert!(x.abs() < 0.01, "x = {x}");
    }

    #[test]
    fn non_finite_grad_names_block() {
        let mut p = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let mut opt = Adam::new("l2h", &p, AdamConfig::default());
        let err = opt.step(&mut p, &[vec![0.0], vec![f64::NAN]], 0.1).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGrad {
                group: "l2h".into(),
                index: 1
            }
        );
        assert!(err.to_string().contains("l2h"));
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn decay_hits_endpoints() {
        assert_eq!(exp_decay(5e-4, 5e-5, 0, 99), 5e-4);
        assert!((exp_decay(5e-4, 5e-5, 99, 99) - 5e-5).abs() < 1e-12);
        let mid = exp_decay(1e-3, 1e-5, 50, 100);
        assert!((mid - 1e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = exp_decay(1e-3, 5e-4, s, 100);
            assert!(lr < prev);
            prev = lr;
        }
    }
}

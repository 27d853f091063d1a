use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `θ ← θ − η ∇θ`.
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place. Non-finite gradients leave `params` untouched.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters vs {} gradients", params.len(), grads.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at parameter {i}")));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
                let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Learning rate that decays from `base` to `last` along a half cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub last: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { base: lr, last: lr, total_steps: 1 }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps == 0 || self.base == self.last {
            return self.base;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.last + 0.5 * (self.base - self.last) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        Optimizer::sgd().apply(&mut p, &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        Optimizer::adam().apply(&mut p, &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_descent_arithmetic() {
        let mut p = vec![1.0];
        Optimizer::sgd().apply(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_normalized_gradient() {
        // m̂ = g and v̂ = g² after one step, so Δ = −η g / (|g| + ε).
        let grads = [2.0, -0.5, 1e-3];
        let mut p = vec![0.0; 3];
        Optimizer::adam().apply(&mut p, &grads, 0.01).unwrap();
        for (d, g) in p.iter().zip(grads) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer::adam();
        assert!(matches!(opt.apply(&mut p, &[f64::NAN, 1.0], 0.1), Err(Error::Divergence(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule { base: 1e-3, last: 1e-5, total_steps: 100 };
        assert_eq!(s.at(0), 1e-3);
        assert!((s.at(100) - 1e-5).abs() < 1e-18);
        assert!((s.at(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(5e-5).at(1234), 5e-5);
    }
}

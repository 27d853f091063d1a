//! Discrete variance-preserving noise schedule.
//!
//! Index `t = 0` is clean data. For `t >= 1` the forward marginal is
//! `z_t = alpha_hat[t] * z_0 + sigma_hat[t] * eps` with
//! `alpha_hat = sqrt(alpha_bar)` and `sigma_hat = sqrt(1 - alpha_bar)`.
//! The per-step `alpha[t] = 1 - beta[t]` is kept separately for the
//! ancestral update, which is written in terms of the single-step factor.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    // All arrays are indexed by step; slot 0 of `beta`/`alpha` is unused (NaN).
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha_hat: Vec<f64>,
    sigma_hat: Vec<f64>,
}

/// Coefficients at one step. `alpha`/`beta` are undefined at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha_hat: f64,
    pub sigma_hat: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let mut beta = vec![f64::NAN; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * (t - 1) as f64 / (steps - 1) as f64
            };
        }
        // Pin the endpoints so they are reproduced exactly.
        beta[1] = beta_min;
        beta[steps] = if steps == 1 { beta_min } else { beta_max };
        Self::from_betas(beta)
    }

    fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let steps = beta.len() - 1;
        let mut alpha = vec![f64::NAN; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let alpha_hat = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma_hat = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self { steps, beta, alpha, alpha_bar, alpha_hat, sigma_hat })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn coeffs_at(&self, t: usize) -> Result<Coeffs> {
        self.check(t)?;
        let (alpha, beta) = if t == 0 { (None, None) } else { (Some(self.alpha[t]), Some(self.beta[t])) };
        Ok(Coeffs { alpha_hat: self.alpha_hat[t], sigma_hat: self.sigma_hat[t], alpha, beta })
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    // Unchecked accessors for hot loops; callers validate `t` up front.

    pub fn alpha_hat(&self, t: usize) -> f64 {
        self.alpha_hat[t]
    }

    pub fn sigma_hat(&self, t: usize) -> f64 {
        self.sigma_hat[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step `1 - beta[t]`, `t >= 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }
}

//! Synthetic latent datasets and closed-form Gaussian oracles.
//!
//! A dataset is a diagonal Gaussian or a mixture of diagonal Gaussians. Each
//! component is bound to one synthetic singer: a fixed speaker embedding and a
//! base pitch from which per-sample F0 contours are drawn. Content vectors are
//! drawn fresh for every sample.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::f0cond::{quantize_logf0, F0Contour};
use crate::rng::{self, Generator};
use crate::schedule::NoiseSchedule;

/// Diagonal Gaussian data distribution with exact diffusion quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Substep floor for the probability-flow integrator.
pub const FLOW_MIN_SUBSTEPS: usize = 10_000;
const FLOW_TOL: f64 = 1e-11;
const FLOW_MAX_DOUBLINGS: usize = 6;

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != var.len() {
            return Err(Error::Invalid(format!("mean has {} entries, var has {}", mean.len(), var.len())));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(format!("variances must be positive, got {v}")));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// `E[z_0 | z_t]` at noise level `(alpha_hat, sigma_hat)`.
    pub fn posterior_mean_at(&self, z: &[f64], alpha_hat: f64, sigma_hat: f64) -> Vec<f64> {
        let s2 = sigma_hat * sigma_hat;
        z.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((z, m), v)| (alpha_hat * v * z + s2 * m) / (alpha_hat * alpha_hat * v + s2))
            .collect()
    }

    pub fn posterior_mean(&self, z_t: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(z_t)?;
        let c = s.coeffs_at(t)?;
        Ok(self.posterior_mean_at(z_t, c.alpha_hat, c.sigma_hat))
    }

    /// `E[ε | z_t]`, written as `σ̂ (z − α̂ m) / (α̂² v + σ̂²)` so it stays finite at σ̂ = 0.
    pub fn eps_at(&self, z: &[f64], alpha_hat: f64, sigma_hat: f64) -> Vec<f64> {
        let s2 = sigma_hat * sigma_hat;
        z.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((z, m), v)| sigma_hat * (z - alpha_hat * m) / (alpha_hat * alpha_hat * v + s2))
            .collect()
    }

    /// Optimal noise prediction. Zero at `t = 0`.
    pub fn eps(&self, z_t: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(z_t)?;
        let c = s.coeffs_at(t)?;
        Ok(self.eps_at(z_t, c.alpha_hat, c.sigma_hat))
    }

    /// Per-coordinate variance of the forward marginal at step `t`.
    pub fn marginal_var(&self, t: usize, s: &NoiseSchedule) -> Vec<f64> {
        let (a, sg) = (s.alpha_hat(t), s.sigma_hat(t));
        self.var.iter().map(|v| a * a * v + sg * sg).collect()
    }

    /// Transports `z_t` from step `t` to `s_target` along the probability-flow ODE.
    ///
    /// With `y = z / α̂` and `λ = σ̂ / α̂` the ODE reads `dy/dλ = ε*(α̂ y)`, which only
    /// depends on the endpoints' noise levels. Integrated with RK4 on a uniform
    /// λ grid, doubling the substep count until two successive solutions agree.
    pub fn flow(&self, z_t: &[f64], t: usize, s_target: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(z_t)?;
        sched.check(t)?;
        if s_target > t {
            return Err(Error::Invalid(format!("flow target {s_target} is after start {t}")));
        }
        if s_target == t {
            return Ok(z_t.to_vec());
        }
        let lam0 = sched.sigma_hat(t) / sched.alpha_hat(t);
        let lam1 = sched.sigma_hat(s_target) / sched.alpha_hat(s_target);
        let y0: Vec<f64> = z_t.iter().map(|z| z / sched.alpha_hat(t)).collect();

        let mut n = FLOW_MIN_SUBSTEPS;
        let mut prev = self.integrate(&y0, lam0, lam1, n);
        for _ in 0..FLOW_MAX_DOUBLINGS {
            n *= 2;
            let next = self.integrate(&y0, lam0, lam1, n);
            let diff = prev.iter().zip(&next).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())).fold(0.0, f64::max);
            prev = next;
            if diff < FLOW_TOL {
                break;
            }
        }
        let a1 = sched.alpha_hat(s_target);
        Ok(prev.into_iter().map(|y| a1 * y).collect())
    }

    fn integrate(&self, y0: &[f64], lam0: f64, lam1: f64, n: usize) -> Vec<f64> {
        let h = (lam1 - lam0) / n as f64;
        let field = |y: &[f64], lam: f64| -> Vec<f64> {
            let a = 1.0 / (1.0 + lam * lam).sqrt();
            let x: Vec<f64> = y.iter().map(|y| a * y).collect();
            self.eps_at(&x, a, lam * a)
        };
        let mut y = y0.to_vec();
        let mut tmp = vec![0.0; y.len()];
        for i in 0..n {
            let lam = lam0 + i as f64 * h;
            let k1 = field(&y, lam);
            tmp.iter_mut().zip(&y).zip(&k1).for_each(|((t, y), k)| *t = y + 0.5 * h * k);
            let k2 = field(&tmp, lam + 0.5 * h);
            tmp.iter_mut().zip(&y).zip(&k2).for_each(|((t, y), k)| *t = y + 0.5 * h * k);
            let k3 = field(&tmp, lam + 0.5 * h);
            tmp.iter_mut().zip(&y).zip(&k3).for_each(|((t, y), k)| *t = y + h * k);
            let k4 = field(&tmp, lam + h);
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        y
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!("vector of dim {} vs oracle dim {}", z.len(), self.dim())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSpec {
    Gaussian(GaussianOracle),
    /// Equal-weight mixture; component `k` belongs to singer `k`.
    Mixture(Vec<GaussianOracle>),
}

impl DataSpec {
    pub fn components(&self) -> &[GaussianOracle] {
        match self {
            DataSpec::Gaussian(g) => std::slice::from_ref(g),
            DataSpec::Mixture(c) => c,
        }
    }

    /// Two components at `±separation` in every coordinate.
    pub fn two_singer(dim: usize, separation: f64, var: f64) -> Result<Self> {
        Ok(DataSpec::Mixture(vec![
            GaussianOracle::new(vec![separation; dim], vec![var; dim])?,
            GaussianOracle::new(vec![-separation; dim], vec![var; dim])?,
        ]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingerProfile {
    pub speaker: Vec<f64>,
    /// Base pitch of this singer's contours, Hz.
    pub f0_hz: f64,
}

/// A data distribution plus its synthetic singers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: DataSpec,
    pub singers: Vec<SingerProfile>,
    pub content_dim: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f64>,
    pub cond: Vec<Condition>,
    /// Generating component of each row.
    pub component: Vec<usize>,
}

impl LatentBatch {
    pub fn new(z: Array2<f64>, cond: Vec<Condition>, component: Vec<usize>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::Invalid("latent batch must have at least one row and one column".into()));
        }
        if cond.len() != z.nrows() || component.len() != z.nrows() {
            return Err(Error::Shape(format!("{} rows but {} conditions", z.nrows(), cond.len())));
        }
        Ok(Self { z, cond, component })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> LatentBatch {
        LatentBatch {
            z: self.z.select(ndarray::Axis(0), rows),
            cond: rows.iter().map(|&i| self.cond[i].clone()).collect(),
            component: rows.iter().map(|&i| self.component[i]).collect(),
        }
    }

    /// Uniform draw of `size` rows with replacement.
    pub fn minibatch(&self, size: usize, rng: &mut Generator) -> LatentBatch {
        let rows: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&rows)
    }
}

impl SyntheticTask {
    pub fn new(spec: DataSpec, content_dim: usize, speaker_dim: usize, frames: usize, seed: u64) -> Result<Self> {
        let comps = spec.components();
        if comps.is_empty() {
            return Err(Error::Invalid("data spec has no components".into()));
        }
        let dim = comps[0].dim();
        if comps.iter().any(|c| c.dim() != dim) {
            return Err(Error::Invalid("mixture components differ in dimension".into()));
        }
        if speaker_dim == 0 || frames == 0 {
            return Err(Error::Invalid("speaker_dim and frames must be >= 1".into()));
        }
        let mut g = rng::stream(seed, rng::streams::SINGERS);
        let singers = (0..comps.len())
            .map(|k| SingerProfile { speaker: rng::normal_vec(&mut g, speaker_dim), f0_hz: 150.0 * 1.4f64.powi(k as i32) })
            .collect();
        Ok(Self { spec, singers, content_dim, frames })
    }

    pub fn dim(&self) -> usize {
        self.spec.components()[0].dim()
    }

    pub fn num_components(&self) -> usize {
        self.singers.len()
    }

    pub fn oracle(&self, component: usize) -> &GaussianOracle {
        &self.spec.components()[component]
    }

    /// Pitch contour of singer `k`: per-sample base jitter, slow vibrato and
    /// occasional unvoiced frames (at least one frame stays voiced).
    pub fn sample_contour(&self, k: usize, rng: &mut Generator) -> F0Contour {
        let base = self.singers[k].f0_hz * (0.03 * rng::normal(rng)).exp();
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let mut values: Vec<f64> = (0..self.frames)
            .map(|i| {
                let voiced = rng.random::<f64>() >= 0.1;
                let vib = 1.0 + 0.02 * (std::f64::consts::TAU * i as f64 / self.frames as f64 + phase).sin();
                if voiced {
                    base * vib
                } else {
                    0.0
                }
            })
            .collect();
        if values.iter().all(|&v| v == 0.0) {
            values[0] = base;
        }
        F0Contour::new(values).expect("synthetic contour is valid")
    }

    pub fn condition_from(&self, content: Vec<f64>, contour: &F0Contour, speaker: Vec<f64>) -> Condition {
        Condition::new(content, quantize_logf0(contour), speaker)
    }

    pub fn sample_condition(&self, k: usize, rng: &mut Generator) -> Condition {
        let content = rng::normal_vec(rng, self.content_dim);
        let contour = self.sample_contour(k, rng);
        self.condition_from(content, &contour, self.singers[k].speaker.clone())
    }

    /// Conditions for `n` rows, cycling through the components.
    pub fn sample_conditions(&self, n: usize, rng: &mut Generator) -> (Vec<Condition>, Vec<usize>) {
        let comps: Vec<usize> = (0..n).map(|i| i % self.num_components()).collect();
        (comps.iter().map(|&k| self.sample_condition(k, rng)).collect(), comps)
    }
}

/// `n` i.i.d. rows from the task; deterministic in `seed`.
pub fn sample_dataset(task: &SyntheticTask, n: usize, seed: u64) -> Result<LatentBatch> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be >= 1".into()));
    }
    let mut g = rng::stream(seed, rng::streams::DATA);
    let dim = task.dim();
    let mut z = Array2::zeros((n, dim));
    let mut cond = Vec::with_capacity(n);
    let mut component = Vec::with_capacity(n);
    for i in 0..n {
        let k = g.random_range(0..task.num_components());
        let o = task.oracle(k);
        for j in 0..dim {
            z[[i, j]] = o.mean[j] + o.var[j].sqrt() * rng::normal(&mut g);
        }
        cond.push(task.sample_condition(k, &mut g));
        component.push(k);
    }
    LatentBatch::new(z, cond, component)
}

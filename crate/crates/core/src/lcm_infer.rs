//! Few-step consistency sampling: one jump from noise, then optional rounds
//! of re-noising to an intermediate step and jumping back.

use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::f0cond::{quantize_logf0, shift_f0, F0Contour};
use crate::lcd::{consistency_fn, ConsistencyParams};
use crate::predictor::NoisePredictor;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::synthdata::GaussianOracle;

/// Strictly decreasing intermediate steps, each in `1..T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSequence(Vec<usize>);

impl TimestepSequence {
    pub fn new(taus: Vec<usize>, steps: usize) -> Result<Self> {
        if taus.iter().any(|&t| t == 0 || t >= steps) {
            return Err(Error::Invalid(format!("every tau must lie in 1..{steps}, got {taus:?}")));
        }
        if taus.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid(format!("taus must strictly decrease, got {taus:?}")));
        }
        Ok(Self(taus))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total consistency evaluations: the initial jump plus one per tau.
    pub fn evaluations(&self) -> usize {
        self.0.len() + 1
    }
}

/// Uniform spacing `τ_n = round(T (N − n) / N)` for `n = 1..N−1`.
pub fn make_tau_sequence(n: usize, steps: usize) -> Result<TimestepSequence> {
    if n == 0 || n > steps {
        return Err(Error::Invalid(format!("inference steps must lie in 1..={steps}, got {n}")));
    }
    let mut taus: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 1..n {
        let tau = ((steps * (n - i)) as f64 / n as f64).round() as usize;
        let tau = tau.clamp(1, steps - 1);
        if taus.last() != Some(&tau) {
            taus.push(tau);
        }
    }
    TimestepSequence::new(taus, steps)
}

/// A map from a noisy latent at step `t` to a clean estimate.
pub trait ConsistencyMap {
    fn latent_dim(&self) -> usize;

    fn apply(&self, z: ArrayView2<f64>, t: usize, cond: &[Condition]) -> Result<Array2<f64>>;
}

/// `F_θ` backed by a noise predictor, optionally with guidance re-applied at
/// inference (two network calls per evaluation).
#[derive(Debug, Clone)]
pub struct LatentConsistency<P> {
    pub model: P,
    pub params: ConsistencyParams,
    pub schedule: NoiseSchedule,
    pub guidance: Option<f64>,
}

impl<P: NoisePredictor> LatentConsistency<P> {
    pub fn new(model: P, params: ConsistencyParams, schedule: NoiseSchedule) -> Self {
        Self { model, params, schedule, guidance: None }
    }

    pub fn with_guidance(mut self, omega: Option<f64>) -> Self {
        self.guidance = omega;
        self
    }
}

impl<P: NoisePredictor> ConsistencyMap for LatentConsistency<P> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn apply(&self, z: ArrayView2<f64>, t: usize, cond: &[Condition]) -> Result<Array2<f64>> {
        let ts = vec![t; z.nrows()];
        let with_cond = consistency_fn(&self.model, z, &ts, cond, &self.params, &self.schedule)?;
        match self.guidance {
            Some(omega) if omega != 0.0 => {
                let nulls = vec![Condition::null(); cond.len()];
                let without = consistency_fn(&self.model, z, &ts, &nulls, &self.params, &self.schedule)?;
                Ok(crate::ddim::combine_guidance(with_cond.view(), without.view(), omega))
            }
            _ => Ok(with_cond),
        }
    }
}

/// Exact consistency map for Gaussian data: the probability-flow endpoint.
/// The flow is affine per coordinate, so each step's slope and intercept are
/// measured once by integrating the flow from two probe points.
#[derive(Debug)]
pub struct OracleConsistency {
    oracle: GaussianOracle,
    schedule: NoiseSchedule,
    coeffs: Vec<OnceLock<(Vec<f64>, Vec<f64>)>>,
}

impl OracleConsistency {
    pub fn new(oracle: GaussianOracle, schedule: NoiseSchedule) -> Self {
        let coeffs = (0..=schedule.steps()).map(|_| OnceLock::new()).collect();
        Self { oracle, schedule, coeffs }
    }

    fn coeffs(&self, t: usize) -> Result<&(Vec<f64>, Vec<f64>)> {
        self.schedule.check(t)?;
        if let Some(c) = self.coeffs[t].get() {
            return Ok(c);
        }
        let d = self.oracle.dim();
        let intercept = self.oracle.flow(&vec![0.0; d], t, 0, &self.schedule)?;
        let at_one = self.oracle.flow(&vec![1.0; d], t, 0, &self.schedule)?;
        let slope = at_one.iter().zip(&intercept).map(|(a, b)| a - b).collect();
        Ok(self.coeffs[t].get_or_init(|| (slope, intercept)))
    }
}

impl ConsistencyMap for OracleConsistency {
    fn latent_dim(&self) -> usize {
        self.oracle.dim()
    }

    fn apply(&self, z: ArrayView2<f64>, t: usize, _cond: &[Condition]) -> Result<Array2<f64>> {
        if z.ncols() != self.oracle.dim() {
            return Err(Error::Shape(format!("oracle dim {} vs latent {:?}", self.oracle.dim(), z.dim())));
        }
        let (slope, intercept) = self.coeffs(t)?;
        let mut out = z.to_owned();
        for mut row in out.rows_mut() {
            for ((v, a), b) in row.iter_mut().zip(slope).zip(intercept) {
                *v = a * *v + b;
            }
        }
        Ok(out)
    }
}

/// Multi-step consistency sampling, one output row per condition.
pub fn lcm_sample<M: ConsistencyMap + ?Sized>(
    m: &M,
    cond: &[Condition],
    taus: &TimestepSequence,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut g = rng::stream(seed, rng::streams::SAMPLE);
    let n = cond.len();
    let d = m.latent_dim();
    let z_t = rng::normal_matrix(&mut g, n, d);
    let mut x0 = m.apply(z_t.view(), s.steps(), cond)?;
    for &tau in taus.as_slice() {
        let noise = rng::normal_matrix(&mut g, n, d);
        let (a, sg) = (s.alpha_hat(tau), s.sigma_hat(tau));
        let mut z = x0;
        Zip::from(&mut z).and(&noise).for_each(|z, &e| *z = a * *z + sg * e);
        x0 = m.apply(z.view(), tau, cond)?;
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("consistency sampling produced non-finite values".into()));
    }
    Ok(x0)
}

/// Cross-combined condition: source content, source pitch optionally moved to
/// a target voiced mean, target speaker. Pitch is shifted in Hz and then
/// quantized.
pub fn conversion_condition(
    content_src: &[f64],
    f0_src: &F0Contour,
    speaker_tar: &[f64],
    target_f0_mean: Option<f64>,
) -> Result<Condition> {
    let contour = match target_f0_mean {
        Some(mean) => shift_f0(f0_src, mean)?,
        None => f0_src.clone(),
    };
    Ok(Condition::new(content_src.to_vec(), quantize_logf0(&contour), speaker_tar.to_vec()))
}

/// Draws `n` conversions of one source under the target speaker.
#[allow(clippy::too_many_arguments)]
pub fn convert<M: ConsistencyMap + ?Sized>(
    m: &M,
    content_src: &[f64],
    f0_src: &F0Contour,
    speaker_tar: &[f64],
    target_f0_mean: Option<f64>,
    n: usize,
    taus: &TimestepSequence,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    let c = conversion_condition(content_src, f0_src, speaker_tar, target_f0_mean)?;
    lcm_sample(m, &vec![c; n], taus, s, seed)
}

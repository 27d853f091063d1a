//! Per-sample latency of the teacher chain versus few-step consistency sampling.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::denoiser::{Condition, DenoiserModel};
use crate::diffusion::ancestral_sample;
use crate::error::{Error, Result};
use crate::lcd::ConsistencyParams;
use crate::lcm_infer::{lcm_sample, make_tau_sequence, LatentConsistency};
use crate::predictor::CountingPredictor;
use crate::schedule::NoiseSchedule;

/// `teacher-<steps>` or `lcm-<N>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerSpec {
    Teacher(usize),
    Lcm(usize),
}

impl FromStr for SamplerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown sampler '{s}', expected teacher-<T> or lcm-<N>"));
        let (kind, n) = s.trim().rsplit_once('-').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        match kind {
            "teacher" => Ok(Self::Teacher(n)),
            "lcm" => Ok(Self::Lcm(n)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Teacher(n) => write!(f, "teacher-{n}"),
            Self::Lcm(n) => write!(f, "lcm-{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub method: String,
    /// Denoiser evaluations per sample.
    pub steps: usize,
    pub wall_ns_median: f64,
    pub wall_ns_p10: f64,
    pub wall_ns_p90: f64,
    pub dim: usize,
    pub batch: usize,
    pub trials: usize,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub trials: usize,
    pub warmups: usize,
    pub seed: u64,
}

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn output_hash(x: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs one sampler. Teacher chains use the model as a noise predictor;
/// `lcm-N` wraps it as a consistency function.
pub fn run_sampler(
    m: &CountingPredictor<&DenoiserModel>,
    spec: SamplerSpec,
    cond: &[Condition],
    params: &ConsistencyParams,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    match spec {
        SamplerSpec::Teacher(steps) => {
            if steps != s.steps() {
                return Err(Error::Config(format!("teacher chain length {steps} differs from schedule length {}", s.steps())));
            }
            ancestral_sample(m, cond, s, seed)
        }
        SamplerSpec::Lcm(n) => {
            let taus = make_tau_sequence(n, s.steps())?;
            lcm_sample(&LatentConsistency::new(m, *params, s.clone()), cond, &taus, s, seed)
        }
    }
}

/// Times `trials` end-to-end runs after `warmups` discarded runs. Every run
/// must produce identical outputs; the returned hash identifies them.
pub fn bench_sampler(
    m: &DenoiserModel,
    spec: SamplerSpec,
    cond: &[Condition],
    params: &ConsistencyParams,
    s: &NoiseSchedule,
    opts: &BenchOptions,
) -> Result<(BenchRecord, String)> {
    if cond.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one sample".into()));
    }
    if opts.trials < 5 {
        return Err(Error::Config(format!("benchmark needs at least 5 trials, got {}", opts.trials)));
    }
    if m.arch().steps != s.steps() {
        return Err(Error::Config(format!("model built for {} steps, schedule has {}", m.arch().steps, s.steps())));
    }
    let counter = CountingPredictor::new(m);
    let mut reference: Option<String> = None;
    let mut times = Vec::with_capacity(opts.trials);
    let mut calls = 0;
    for run in 0..opts.warmups + opts.trials {
        counter.reset();
        let start = Instant::now();
        let out = run_sampler(&counter, spec, cond, params, s, opts.seed)?;
        let elapsed = start.elapsed().as_nanos() as f64;
        let hash = output_hash(&out);
        match &reference {
            None => reference = Some(hash),
            Some(r) if *r != hash => return Err(Error::Invalid(format!("{spec} produced different outputs across runs"))),
            Some(_) => {}
        }
        calls = counter.rows() / cond.len();
        if run >= opts.warmups {
            times.push(elapsed / cond.len() as f64);
        }
    }
    times.sort_by(f64::total_cmp);
    let record = BenchRecord {
        method: spec.to_string(),
        steps: calls,
        wall_ns_median: quantile(&times, 0.5),
        wall_ns_p10: quantile(&times, 0.1),
        wall_ns_p90: quantile(&times, 0.9),
        dim: m.arch().latent_dim,
        batch: cond.len(),
        trials: opts.trials,
    };
    Ok((record, reference.unwrap_or_default()))
}

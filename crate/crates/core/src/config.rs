//! Experiment configuration: TOML with one table per section. Every field
//! has a default, unknown keys are rejected and ranges are checked on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, OptimizerKind};
use crate::error::{Error, Result};
use crate::lcd::ConsistencyParams;
use crate::schedule::NoiseSchedule;
use crate::synthdata::{DataSpec, GaussianOracle, SyntheticTask};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub lcd: LcdConfig,
    pub inference: InferenceConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// `N(0, variance · I)`.
    Gaussian,
    /// Two equal-weight components at `±separation` on every coordinate.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub distribution: Distribution,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub variance: f64,
    pub separation: f64,
    pub content_dim: usize,
    pub speaker_dim: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub f0_dim: usize,
    pub time_freqs: usize,
    pub time_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at the last iteration (cosine decay).
    pub lr_final: f64,
    pub optimizer: OptimizerKind,
    pub p_uncond: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSource {
    /// A trained teacher checkpoint; the student starts as its copy.
    Checkpoint,
    /// The closed-form Gaussian noise predictor; the student starts fresh.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcdConfig {
    pub teacher: TeacherSource,
    pub iters: u64,
    pub batch: usize,
    pub mu: f64,
    pub omega: f64,
    pub k: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub optimizer: OptimizerKind,
    pub sigma_data: f64,
    pub time_scale: f64,
    /// Steps between self-consistency measurements; 0 measures only at the end.
    pub monitor_every: u64,
    pub monitor_rows: usize,
    /// Steps between intermediate checkpoints; 0 writes only the final pair.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Few-step consistency sampling.
    Lcm,
    /// Full ancestral chain of a noise predictor.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    /// Explicit intermediate steps; replaces the uniform spacing when set.
    pub taus: Option<Vec<usize>>,
    pub samples: usize,
    pub use_ema: bool,
    pub guidance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: usize,
    pub warmups: usize,
    pub batch: usize,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_min: 1e-4, beta_max: 0.06 }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            distribution: Distribution::Gaussian,
            dim: 8,
            n: 20_000,
            seed: 1,
            variance: 1.0,
            separation: 2.0,
            content_dim: 4,
            speaker_dim: 4,
            frames: 8,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 64, depth: 2, f0_dim: 4, time_freqs: 4, time_dim: 16, seed: 3 }
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { iters: 20_000, batch: 256, lr: 5e-5, lr_final: 5e-5, optimizer: OptimizerKind::Sgd, p_uncond: 0.1 }
    }
}

impl Default for LcdConfig {
    fn default() -> Self {
        Self {
            teacher: TeacherSource::Checkpoint,
            iters: 20_000,
            batch: 256,
            mu: 0.95,
            omega: 0.3,
            k: 10,
            lr: 5e-5,
            lr_final: 5e-5,
            optimizer: OptimizerKind::Sgd,
            sigma_data: 0.5,
            time_scale: 10.0,
            monitor_every: 1000,
            monitor_rows: 64,
            checkpoint_every: 0,
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { sampler: SamplerKind::Lcm, steps: 1, taus: None, samples: 2000, use_ema: false, guidance: false }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 7,
            warmups: 2,
            batch: 16,
            methods: ["teacher-100", "lcm-4", "lcm-2", "lcm-1"].map(String::from).to_vec(),
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default") }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v.is_finite(), || format!("{name} must be positive and finite, got {v}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        ensure(s.steps >= 2, || format!("schedule.steps must be >= 2, got {}", s.steps))?;
        ensure(0.0 < s.beta_min && s.beta_min <= s.beta_max && s.beta_max < 1.0, || {
            format!("need 0 < beta_min <= beta_max < 1, got {} / {}", s.beta_min, s.beta_max)
        })?;

        let d = &self.data;
        ensure(d.dim >= 1 && d.n >= 2, || "data.dim must be >= 1 and data.n >= 2".into())?;
        ensure(d.speaker_dim >= 1 && d.frames >= 1, || "data.speaker_dim and data.frames must be >= 1".into())?;
        positive("data.variance", d.variance)?;
        ensure(d.separation.is_finite() && d.separation >= 0.0, || "data.separation must be finite and >= 0".into())?;

        let m = &self.model;
        ensure(m.width >= 1 && m.depth >= 1 && m.f0_dim >= 1 && m.time_dim >= 1, || {
            "model.width, depth, f0_dim and time_dim must be >= 1".into()
        })?;
        ensure(m.time_freqs <= 30, || "model.time_freqs must be <= 30".into())?;

        let t = &self.teacher;
        ensure(t.batch >= 1, || "teacher.batch must be >= 1".into())?;
        positive("teacher.lr", t.lr)?;
        ensure(t.lr_final >= 0.0 && t.lr_final.is_finite(), || "teacher.lr_final must be >= 0".into())?;
        ensure((0.0..=1.0).contains(&t.p_uncond), || format!("teacher.p_uncond must lie in [0, 1], got {}", t.p_uncond))?;

        let l = &self.lcd;
        ensure(l.batch >= 1 && l.monitor_rows >= 1, || "lcd.batch and lcd.monitor_rows must be >= 1".into())?;
        ensure((0.0..=1.0).contains(&l.mu), || format!("lcd.mu must lie in [0, 1], got {}", l.mu))?;
        ensure(l.omega.is_finite() && l.omega >= 0.0, || format!("lcd.omega must be >= 0, got {}", l.omega))?;
        ensure(l.k >= 1 && l.k < s.steps, || format!("lcd.k must lie in 1..{}, got {}", s.steps, l.k))?;
        positive("lcd.lr", l.lr)?;
        ensure(l.lr_final >= 0.0 && l.lr_final.is_finite(), || "lcd.lr_final must be >= 0".into())?;
        positive("lcd.sigma_data", l.sigma_data)?;
        positive("lcd.time_scale", l.time_scale)?;
        if l.teacher == TeacherSource::Oracle {
            ensure(d.distribution == Distribution::Gaussian, || "an oracle teacher needs the gaussian distribution".into())?;
        }

        let i = &self.inference;
        ensure(i.steps >= 1 && i.steps <= s.steps, || format!("inference.steps must lie in 1..={}, got {}", s.steps, i.steps))?;
        ensure(i.samples >= 2, || "inference.samples must be >= 2".into())?;
        if let Some(taus) = &i.taus {
            crate::lcm_infer::TimestepSequence::new(taus.clone(), s.steps)?;
        }

        let b = &self.bench;
        ensure(b.trials >= 5, || format!("bench.trials must be >= 5, got {}", b.trials))?;
        ensure(b.batch >= 1, || "bench.batch must be >= 1".into())?;
        for m in &b.methods {
            m.parse::<crate::bench::SamplerSpec>()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_min, self.schedule.beta_max)
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        let d = &self.data;
        let spec = match d.distribution {
            Distribution::Gaussian => DataSpec::Gaussian(GaussianOracle::new(vec![0.0; d.dim], vec![d.variance; d.dim])?),
            Distribution::Mixture => DataSpec::two_singer(d.dim, d.separation, d.variance)?,
        };
        SyntheticTask::new(spec, d.content_dim, d.speaker_dim, d.frames, d.seed)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            latent_dim: self.data.dim,
            width: self.model.width,
            depth: self.model.depth,
            content_dim: self.data.content_dim,
            f0_dim: self.model.f0_dim,
            speaker_dim: self.data.speaker_dim,
            time_freqs: self.model.time_freqs,
            time_dim: self.model.time_dim,
            steps: self.schedule.steps,
        }
    }

    pub fn consistency(&self) -> Result<ConsistencyParams> {
        ConsistencyParams::new(self.lcd.sigma_data, self.lcd.time_scale, self.schedule.steps)
    }
}

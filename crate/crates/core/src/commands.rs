//! Subcommand implementations behind the `lcd` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{bench_sampler, BenchOptions, BenchRecord, SamplerSpec};
use crate::config::{Distribution, ExperimentConfig, SamplerKind, TeacherSource};
use crate::denoiser::{Condition, DenoiserModel, LrSchedule, Optimizer};
use crate::diffusion::{ancestral_sample, TeacherTrainState};
use crate::error::{Error, Result};
use crate::io::{self, load_checkpoint, save_checkpoint, CheckpointMeta, LatentFile};
use crate::lcd::{ConsistencyMonitor, LcdTrainState};
use crate::lcm_infer::{lcm_sample, make_tau_sequence, LatentConsistency, TimestepSequence};
use crate::metrics::{self, Moments};
use crate::predictor::{NoisePredictor, OraclePredictor};
use crate::rng::{self, streams};
use crate::synthdata::{sample_dataset, DataSpec};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const EMA_CKPT: &str = "ema.ckpt";

#[derive(Debug, Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
}

#[derive(Debug, Serialize)]
struct DistillRow {
    step: u64,
    lcd_loss: f64,
    consistency_gap: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TimingRow {
    step: u64,
    wall_ns: u128,
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    io::atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub final_loss: Option<f64>,
}

/// Trains the noise predictor on the configured synthetic data set.
pub fn train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<TeacherRun> {
    let s = cfg.schedule()?;
    let task = cfg.task()?;
    let data = sample_dataset(&task, cfg.data.n, cfg.data.seed)?;
    let model = DenoiserModel::new(cfg.arch(), cfg.model.seed)?;
    let t = &cfg.teacher;
    let lr = LrSchedule { base: t.lr, last: t.lr_final, total_steps: t.iters };
    let mut state = TeacherTrainState::new(model, Optimizer::new(t.optimizer), lr, t.p_uncond, cfg.seed)?;
    let mut batches = rng::stream(cfg.seed, streams::BATCH);
    let mut losses = Vec::with_capacity(t.iters as usize);
    let mut timing = Vec::with_capacity(t.iters as usize);
    let start = Instant::now();
    for step in 1..=t.iters {
        let batch = data.minibatch(t.batch, &mut batches);
        let loss = state.train_step(&batch, &s)?;
        losses.push(LossRow { step, loss });
        timing.push(TimingRow { step, wall_ns: start.elapsed().as_nanos() });
    }
    let final_loss = losses.last().map(|r| r.loss);
    let meta = CheckpointMeta { role: "teacher".into(), step: t.iters, seed: cfg.seed, teacher_hash: None };
    let checkpoint = out.join(TEACHER_CKPT);
    let hash = save_checkpoint(&checkpoint, &state.model, &meta)?;
    io::write_csv(&out.join("teacher_metrics.csv"), &losses)?;
    io::write_csv(&out.join("teacher_timing.csv"), &timing)?;
    write_config(cfg, out)?;
    Ok(TeacherRun { checkpoint, hash, final_loss })
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: PathBuf,
    pub ema: PathBuf,
    pub teacher_hash: String,
    pub final_loss: Option<f64>,
    pub final_gap: f64,
}

fn run_distill<P: NoisePredictor>(
    cfg: &ExperimentConfig,
    mut state: LcdTrainState<P>,
    teacher_hash: String,
    out: &Path,
) -> Result<DistillRun> {
    let s = cfg.schedule()?;
    let task = cfg.task()?;
    let data = sample_dataset(&task, cfg.data.n, cfg.data.seed)?;
    let l = &cfg.lcd;
    let params = cfg.consistency()?;
    let (mon_cond, _) = task.sample_conditions(l.monitor_rows, &mut rng::stream(cfg.seed, streams::MONITOR));
    let monitor = ConsistencyMonitor::new(state.teacher(), mon_cond, l.omega, l.k, &s, cfg.seed)?;
    let mut batches = rng::stream(cfg.seed, streams::BATCH);
    let mut rows = Vec::with_capacity(l.iters as usize);
    let mut timing = Vec::with_capacity(l.iters as usize);
    let meta = |role: &str, step| CheckpointMeta { role: role.into(), step, seed: cfg.seed, teacher_hash: Some(teacher_hash.clone()) };
    let start = Instant::now();
    let mut final_gap = None;
    for step in 1..=l.iters {
        let batch = data.minibatch(l.batch, &mut batches);
        let lcd_loss = state.distill_step(&batch, &s)?;
        let monitored = step == l.iters || (l.monitor_every > 0 && step % l.monitor_every == 0);
        let consistency_gap = if monitored { Some(monitor.gap(&state.student, &params, &s)?) } else { None };
        if step == l.iters {
            final_gap = consistency_gap;
        }
        rows.push(DistillRow { step, lcd_loss, consistency_gap });
        timing.push(TimingRow { step, wall_ns: start.elapsed().as_nanos() });
        if l.checkpoint_every > 0 && step % l.checkpoint_every == 0 && step != l.iters {
            save_checkpoint(&out.join(format!("student_{step}.ckpt")), &state.student, &meta("student", step))?;
            save_checkpoint(&out.join(format!("ema_{step}.ckpt")), &state.target, &meta("ema", step))?;
        }
    }
    let final_gap = match final_gap {
        Some(g) => g,
        None => monitor.gap(&state.student, &params, &s)?,
    };
    let student = out.join(STUDENT_CKPT);
    let ema = out.join(EMA_CKPT);
    save_checkpoint(&student, &state.student, &meta("student", l.iters))?;
    save_checkpoint(&ema, &state.target, &meta("ema", l.iters))?;
    io::write_csv(&out.join("distill_metrics.csv"), &rows)?;
    io::write_csv(&out.join("distill_timing.csv"), &timing)?;
    write_config(cfg, out)?;
    Ok(DistillRun { student, ema, teacher_hash, final_loss: rows.last().map(|r| r.lcd_loss), final_gap })
}

/// Consistency distillation from a teacher checkpoint, or from the Gaussian
/// oracle when configured.
pub fn distill(cfg: &ExperimentConfig, teacher: Option<&Path>, out: &Path) -> Result<DistillRun> {
    let s = cfg.schedule()?;
    let l = &cfg.lcd;
    let params = cfg.consistency()?;
    let lr = LrSchedule { base: l.lr, last: l.lr_final, total_steps: l.iters };
    let opt = Optimizer::new(l.optimizer);
    match l.teacher {
        TeacherSource::Checkpoint => {
            let path = teacher.ok_or_else(|| Error::Config("distillation needs --checkpoint with a teacher".into()))?;
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.arch() != &cfg.arch() {
                return Err(Error::Shape(format!(
                    "teacher architecture {:?} does not match the configured {:?}",
                    ckpt.model.arch(),
                    cfg.arch()
                )));
            }
            let student = ckpt.model.clone();
            let state = LcdTrainState::new(student, ckpt.model, opt, lr, l.mu, l.omega, l.k, params, cfg.seed)?;
            run_distill(cfg, state, ckpt.hash, out)
        }
        TeacherSource::Oracle => {
            let task = cfg.task()?;
            let oracle = match &task.spec {
                DataSpec::Gaussian(o) => o.clone(),
                DataSpec::Mixture(_) => return Err(Error::Config("an oracle teacher needs gaussian data".into())),
            };
            let student = DenoiserModel::new(cfg.arch(), cfg.model.seed)?;
            let state = LcdTrainState::new(student, OraclePredictor::new(oracle, s), opt, lr, l.mu, l.omega, l.k, params, cfg.seed)?;
            run_distill(cfg, state, "oracle".into(), out)
        }
    }
}

/// Metadata written next to every latent file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sampler: String,
    /// Network evaluations per sample.
    pub steps: usize,
    pub taus: Vec<usize>,
    pub seed: u64,
    pub samples: usize,
    pub model_hash: String,
    pub guidance: bool,
}

pub fn sidecar_path(latents: &Path) -> PathBuf {
    let mut p = latents.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn inference_taus(cfg: &ExperimentConfig) -> Result<TimestepSequence> {
    match &cfg.inference.taus {
        Some(t) => TimestepSequence::new(t.clone(), cfg.schedule.steps),
        None => make_tau_sequence(cfg.inference.steps, cfg.schedule.steps),
    }
}

/// Conditions for sampling: round-robin over components, deterministic in seed.
pub fn sample_conditions(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<(Vec<Condition>, Vec<usize>)> {
    Ok(cfg.task()?.sample_conditions(n, &mut rng::stream(seed, streams::CONDITIONS)))
}

/// Draws `inference.samples` latents from a checkpoint.
pub fn sample(cfg: &ExperimentConfig, checkpoint: &Path, out_file: &Path) -> Result<SampleMeta> {
    let s = cfg.schedule()?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.model.arch().steps != s.steps() || ckpt.model.arch().latent_dim != cfg.data.dim {
        return Err(Error::Shape("checkpoint does not match the configured schedule or latent size".into()));
    }
    let inf = &cfg.inference;
    let (cond, labels) = sample_conditions(cfg, inf.samples, cfg.seed)?;
    let (z, sampler, steps, taus) = match inf.sampler {
        SamplerKind::Teacher => (ancestral_sample(&ckpt.model, &cond, &s, cfg.seed)?, "teacher", s.steps(), Vec::new()),
        SamplerKind::Lcm => {
            let taus = inference_taus(cfg)?;
            let omega = inf.guidance.then_some(cfg.lcd.omega);
            let map = LatentConsistency::new(&ckpt.model, cfg.consistency()?, s.clone()).with_guidance(omega);
            let z = lcm_sample(&map, &cond, &taus, &s, cfg.seed)?;
            (z, "lcm", taus.evaluations(), taus.as_slice().to_vec())
        }
    };
    io::write_latents(out_file, &LatentFile { z, component: Some(labels) })?;
    let meta = SampleMeta {
        sampler: sampler.into(),
        steps,
        taus,
        seed: cfg.seed,
        samples: inf.samples,
        model_hash: ckpt.hash,
        guidance: inf.guidance && inf.sampler == SamplerKind::Lcm,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    io::atomic_write(&sidecar_path(out_file), &json)?;
    Ok(meta)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub file: String,
    pub sampler: String,
    pub steps: Option<usize>,
    pub samples: usize,
    pub mean_error: f64,
    pub cov_error: f64,
    pub squared_error: f64,
    /// Mean squared moment error of each component's rows against that component.
    pub conditional_error: Option<f64>,
    /// Fraction of rows nearest to their labelled component mean (mixtures only).
    pub accuracy: Option<f64>,
}

/// Scores latent files against the configured data distribution.
pub fn eval(cfg: &ExperimentConfig, files: &[PathBuf], report: &Path) -> Result<Vec<EvalRow>> {
    let task = cfg.task()?;
    let reference = Moments::of_mixture(task.spec.components());
    let mut rows = Vec::new();
    for f in files {
        let lat = io::read_latents(f)?;
        if lat.z.ncols() != task.dim() {
            return Err(Error::Shape(format!("{} has dimension {}, reference has {}", f.display(), lat.z.ncols(), task.dim())));
        }
        let meta: Option<SampleMeta> = match std::fs::read(sidecar_path(f)) {
            Ok(b) => Some(serde_json::from_slice(&b).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?),
            Err(_) => None,
        };
        let errs = metrics::moment_errors(&metrics::sample_moments(lat.z.view())?, &reference)?;
        let (conditional_error, accuracy) = match &lat.component {
            Some(labels) => {
                let ce = Some(metrics::conditional_error(lat.z.view(), labels, &task)?);
                let acc = (cfg.data.distribution == Distribution::Mixture)
                    .then(|| metrics::assignment_accuracy(lat.z.view(), labels, task.spec.components()));
                (ce, acc)
            }
            None => (None, None),
        };
        rows.push(EvalRow {
            file: f.display().to_string(),
            sampler: meta.as_ref().map(|m| m.sampler.clone()).unwrap_or_default(),
            steps: meta.as_ref().map(|m| m.steps),
            samples: lat.z.nrows(),
            mean_error: errs.mean,
            cov_error: errs.cov,
            squared_error: errs.squared,
            conditional_error,
            accuracy,
        });
    }
    io::write_csv(report, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct BenchOutputRow {
    method: String,
    steps: usize,
    batch: usize,
    output_hash: String,
}

/// Times each sampler; latencies go to `bench.csv`, output hashes to
/// `bench_outputs.csv`.
pub fn bench(cfg: &ExperimentConfig, checkpoint: &Path, methods: &[String], out: &Path) -> Result<Vec<BenchRecord>> {
    let s = cfg.schedule()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let params = cfg.consistency()?;
    let (cond, _) = sample_conditions(cfg, cfg.bench.batch, cfg.seed)?;
    let opts = BenchOptions { trials: cfg.bench.trials, warmups: cfg.bench.warmups, seed: cfg.seed };
    let mut records = Vec::new();
    let mut hashes = Vec::new();
    for m in methods {
        let spec: SamplerSpec = m.parse()?;
        let (rec, hash) = bench_sampler(&ckpt.model, spec, &cond, &params, &s, &opts)?;
        hashes.push(BenchOutputRow { method: rec.method.clone(), steps: rec.steps, batch: rec.batch, output_hash: hash });
        records.push(rec);
    }
    io::write_csv(&out.join("bench.csv"), &records)?;
    io::write_csv(&out.join("bench_outputs.csv"), &hashes)?;
    Ok(records)
}

//! Consistency function, distillation loss and the EMA-target trainer.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddim::{guided_target, guided_target_rows};
use crate::denoiser::{Condition, DenoiserModel, Gradients, LrSchedule, Optimizer};
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::rng::{self, Generator};
use crate::schedule::NoiseSchedule;
use crate::synthdata::LatentBatch;

/// Boundary weights `c_skip(t)`, `c_out(t)` on the scaled time `u = t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyParams {
    pub sigma_data: f64,
    pub time_scale: f64,
    pub steps: usize,
}

impl ConsistencyParams {
    pub fn new(sigma_data: f64, time_scale: f64, steps: usize) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) || !(time_scale > 0.0 && time_scale.is_finite()) || steps == 0 {
            return Err(Error::Config(format!(
                "consistency weights need sigma_data > 0, time_scale > 0, steps > 0 (got {sigma_data}, {time_scale}, {steps})"
            )));
        }
        Ok(Self { sigma_data, time_scale, steps })
    }

    fn scaled(&self, t: usize) -> f64 {
        self.time_scale * t as f64 / self.steps as f64
    }

    pub fn c_skip(&self, t: usize) -> f64 {
        let (x, sd2) = (self.scaled(t), self.sigma_data * self.sigma_data);
        sd2 / (x * x + sd2)
    }

    pub fn c_out(&self, t: usize) -> f64 {
        let (x, sd2) = (self.scaled(t), self.sigma_data * self.sigma_data);
        self.sigma_data * x / (x * x + sd2).sqrt()
    }
}

/// Per-row affine pieces of `F = skip·z + out·(z − σ̂ ε)/α̂ = a·z + b·ε`.
fn affine(params: &ConsistencyParams, s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (ah, sh) = (s.alpha_hat(t), s.sigma_hat(t));
    let out = params.c_out(t);
    (params.c_skip(t) + out / ah, -out * sh / ah)
}

/// Combines `z` and a noise estimate into `F(z, t)` row-wise.
pub fn consistency_from_eps(
    z: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: &[usize],
    params: &ConsistencyParams,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if z.dim() != eps.dim() || t.len() != z.nrows() {
        return Err(Error::Shape(format!("z {:?}, eps {:?}, {} steps", z.dim(), eps.dim(), t.len())));
    }
    let mut out = z.to_owned();
    for ((mut row, e), &ti) in out.rows_mut().into_iter().zip(eps.rows()).zip(t) {
        s.check(ti)?;
        if ti == 0 {
            continue;
        }
        let (a, b) = affine(params, s, ti);
        Zip::from(&mut row).and(&e).for_each(|z, &e| *z = a * *z + b * e);
    }
    Ok(out)
}

/// `F_θ(z_t, t, c)`. Rows at `t = 0` are returned unchanged; the network is
/// skipped entirely when every row is at zero.
pub fn consistency_fn<P: NoisePredictor + ?Sized>(
    m: &P,
    z: ArrayView2<f64>,
    t: &[usize],
    cond: &[Condition],
    params: &ConsistencyParams,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t.len() != z.nrows() {
        return Err(Error::Shape(format!("{} steps for {} rows", t.len(), z.nrows())));
    }
    if t.iter().all(|&ti| ti == 0) {
        return Ok(z.to_owned());
    }
    let eps = m.predict(z, t, cond)?;
    consistency_from_eps(z, eps.view(), t, params, s)
}

/// Squared L2 distance averaged over rows and coordinates.
pub fn distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    Zip::from(&a).and(&b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y)) / n
}

/// Loss and student gradients for an explicit target point:
/// `d(F_θ(z_src, t_src), F_θ⁻(z_tgt, t_tgt))` with the target branch detached.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    student: &DenoiserModel,
    target: &DenoiserModel,
    z_src: ArrayView2<f64>,
    t_src: &[usize],
    z_tgt: ArrayView2<f64>,
    t_tgt: &[usize],
    cond: &[Condition],
    params: &ConsistencyParams,
    s: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    let anchor = consistency_fn(target, z_tgt, t_tgt, cond, params, s)?;
    let (eps, cache) = student.eval(z_src, t_src, cond)?;
    let online = consistency_from_eps(z_src, eps.view(), t_src, params, s)?;
    let loss = distance(online.view(), anchor.view());
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("consistency loss is {loss}")));
    }
    let scale = 2.0 / online.len() as f64;
    let mut grad = &online - &anchor;
    for (mut row, &ti) in grad.rows_mut().into_iter().zip(t_src) {
        let b = if ti == 0 { 0.0 } else { affine(params, s, ti).1 };
        row.mapv_inplace(|g| g * scale * b);
    }
    Ok((loss, student.backward(&cache, grad.view())?))
}

#[derive(Debug, Clone)]
pub struct LcdTrainState<P> {
    pub student: DenoiserModel,
    pub target: DenoiserModel,
    teacher: P,
    pub optimizer: Optimizer,
    pub lr: LrSchedule,
    pub mu: f64,
    pub omega: f64,
    pub skip: usize,
    pub params: ConsistencyParams,
    pub step: u64,
    rng: Generator,
}

/// One draw of the per-row randomness of a distillation step.
#[derive(Debug, Clone)]
pub struct DistillDraw {
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
}

impl<P: NoisePredictor> LcdTrainState<P> {
    /// The target network starts as a copy of the student.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        student: DenoiserModel,
        teacher: P,
        optimizer: Optimizer,
        lr: LrSchedule,
        mu: f64,
        omega: f64,
        skip: usize,
        params: ConsistencyParams,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("EMA rate must lie in [0, 1], got {mu}")));
        }
        if !omega.is_finite() {
            return Err(Error::Config("guidance weight must be finite".into()));
        }
        let steps = student.arch().steps;
        if skip == 0 || skip >= steps {
            return Err(Error::Config(format!("skipping interval must lie in 1..{steps}, got {skip}")));
        }
        if teacher.latent_dim() != student.arch().latent_dim {
            return Err(Error::Shape(format!(
                "teacher dim {} vs student dim {}",
                teacher.latent_dim(),
                student.arch().latent_dim
            )));
        }
        Ok(Self {
            target: student.clone(),
            student,
            teacher,
            optimizer,
            lr,
            mu,
            omega,
            skip,
            params,
            step: 0,
            rng: rng::stream(seed, rng::streams::DISTILL),
        })
    }

    pub fn teacher(&self) -> &P {
        &self.teacher
    }

    /// `t ~ U{1..T−k}` for one row.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R, s: &NoiseSchedule) -> usize {
        rng.random_range(1..=s.steps() - self.skip)
    }

    fn draw(&self, rng: &mut Generator, n: usize, dim: usize, s: &NoiseSchedule) -> DistillDraw {
        let t = (0..n).map(|_| self.sample_t(rng, s)).collect();
        DistillDraw { t, eps: rng::normal_matrix(rng, n, dim) }
    }

    /// Loss for a noised point `z_{t+k}`: the guided teacher jump gives the
    /// target point at `t`, scored by the EMA network.
    pub fn lcd_loss(&self, z_tk: ArrayView2<f64>, t: &[usize], cond: &[Condition], s: &NoiseSchedule) -> Result<(f64, Gradients)> {
        let mut t_src = Vec::with_capacity(t.len());
        for &ti in t {
            if ti == 0 || ti + self.skip > s.steps() {
                return Err(Error::StepOutOfRange { t: ti, max: s.steps() - self.skip });
            }
            t_src.push(ti + self.skip);
        }
        let z_t = guided_target_rows(&self.teacher, z_tk, &t_src, t, cond, self.omega, s)?;
        consistency_loss(&self.student, &self.target, z_tk, &t_src, z_t.view(), t, cond, &self.params, s)
    }

    /// Loss for a fixed draw, without touching any state.
    pub fn loss_for(&self, batch: &LatentBatch, draw: &DistillDraw, s: &NoiseSchedule) -> Result<(f64, Gradients)> {
        let t_src: Vec<usize> = draw.t.iter().map(|t| t + self.skip).collect();
        let z_tk = forward_sample(batch.z.view(), &t_src, draw.eps.view(), s)?;
        self.lcd_loss(z_tk.view(), &draw.t, &batch.cond, s)
    }

    /// `θ⁻ ← μ θ⁻ + (1 − μ) θ`.
    pub fn ema_update(&mut self) -> Result<()> {
        self.target.ema_from(&self.student, self.mu)
    }

    /// One iteration: draw t and noise per row, score the guided target,
    /// descend on the student and refresh the EMA target. Nothing changes
    /// when the loss or update diverges.
    pub fn distill_step(&mut self, batch: &LatentBatch, s: &NoiseSchedule) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty distillation batch".into()));
        }
        let mut rng = self.rng.clone();
        let draw = self.draw(&mut rng, batch.len(), batch.dim(), s);
        let (loss, grads) = self.loss_for(batch, &draw, s)?;
        let snapshot = self.optimizer.clone();
        let mut student = self.student.clone();
        if let Err(e) = student.update(&grads, &mut self.optimizer, self.lr.at(self.step)) {
            self.optimizer = snapshot;
            return Err(e);
        }
        self.student = student;
        self.ema_update()?;
        self.rng = rng;
        self.step += 1;
        Ok(loss)
    }
}

/// Tracks self-consistency along fixed solver trajectories: the mean distance
/// between `F(x_{t+k}, t+k)` and `F(x_t, t)` over `t = 1..T−k`.
#[derive(Debug, Clone)]
pub struct ConsistencyMonitor {
    /// `states[t]` holds the trajectory rows at step `t`.
    states: Vec<Array2<f64>>,
    cond: Vec<Condition>,
    skip: usize,
}

impl ConsistencyMonitor {
    /// Integrates `n` trajectories from `z_T ~ N(0, I)` with unit guided
    /// DDIM steps of the teacher.
    pub fn new<P: NoisePredictor + ?Sized>(
        teacher: &P,
        cond: Vec<Condition>,
        omega: f64,
        skip: usize,
        s: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        let mut g = rng::stream(seed, rng::streams::MONITOR);
        let n = cond.len();
        let mut z = rng::normal_matrix(&mut g, n, teacher.latent_dim());
        let mut states = vec![Array2::zeros((0, 0)); s.steps() + 1];
        for t in (1..=s.steps()).rev() {
            let next = guided_target(teacher, z.view(), t, t - 1, &cond, omega, s)?;
            states[t] = std::mem::replace(&mut z, next);
        }
        states[0] = z;
        Ok(Self { states, cond, skip })
    }

    /// Builds a monitor from precomputed trajectory states indexed by step.
    pub fn from_states(states: Vec<Array2<f64>>, cond: Vec<Condition>, skip: usize) -> Result<Self> {
        if states.iter().any(|x| x.nrows() != cond.len()) {
            return Err(Error::Shape("every trajectory state needs one row per condition".into()));
        }
        Ok(Self { states, cond, skip })
    }

    pub fn state(&self, t: usize) -> ArrayView2<'_, f64> {
        self.states[t].view()
    }

    pub fn gap<P: NoisePredictor + ?Sized>(&self, m: &P, params: &ConsistencyParams, s: &NoiseSchedule) -> Result<f64> {
        let steps = self.states.len() - 1;
        if self.skip >= steps {
            return Err(Error::Invalid("skip exceeds the trajectory length".into()));
        }
        let n = self.cond.len();
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(steps + 1);
        for (t, x) in self.states.iter().enumerate() {
            values.push(consistency_fn(m, x.view(), &vec![t; n], &self.cond, params, s)?);
        }
        let gaps: Array1<f64> = (1..=steps - self.skip).map(|t| distance(values[t + self.skip].view(), values[t].view())).collect();
        Ok(gaps.mean().unwrap_or(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Arch;
    use crate::predictor::OraclePredictor;
    use crate::synthdata::{sample_dataset, DataSpec, GaussianOracle, SyntheticTask};
    use ndarray::array;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.06).unwrap()
    }

    fn params() -> ConsistencyParams {
        ConsistencyParams::new(0.5, 10.0, 100).unwrap()
    }

    fn arch(dim: usize) -> Arch {
        Arch { latent_dim: dim, width: 12, depth: 2, content_dim: 3, f0_dim: 4, speaker_dim: 3, time_freqs: 3, time_dim: 6, steps: 100 }
    }

    fn cond(n: usize) -> Vec<Condition> {
        vec![Condition::new(vec![0.1, 0.2, 0.3], vec![0, 5, 7], vec![1.0, -1.0, 0.5]); n]
    }

    #[test]
    fn boundary_weights() {
        let p = params();
        assert_eq!(p.c_skip(0), 1.0);
        assert_eq!(p.c_out(0), 0.0);
        assert!(p.c_skip(100) < 0.01);
        for t in 1..=100 {
            assert!(p.c_skip(t) < p.c_skip(t - 1));
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let s = sched();
        let m = DenoiserModel::with_random_params(arch(2), 1, 0.3).unwrap();
        let z = array![[0.3, -7.0], [1.0, 2.0]];
        let f = consistency_fn(&m, z.view(), &[0, 0], &cond(2), &params(), &s).unwrap();
        assert_eq!(f, z);
    }

    #[test]
    fn zero_eps_collapse() {
        let s = sched();
        let m = DenoiserModel::new(arch(2), 1).unwrap();
        let z = array![[0.3, -7.0]];
        let f = consistency_fn(&m, z.view(), &[40], &cond(1), &params(), &s).unwrap();
        let p = params();
        let want = p.c_skip(40) + p.c_out(40) / s.alpha_hat(40);
        assert!((f[[0, 0]] - 0.3 * want).abs() < 1e-14);
    }

    #[test]
    fn oracle_inner_term_is_posterior_mean() {
        let s = sched();
        let oracle = GaussianOracle::standard(3);
        let z = [0.4, -1.2, 2.0];
        for t in [1, 30, 100] {
            let eps = oracle.eps(&z, t, &s).unwrap();
            let pm = oracle.posterior_mean(&z, t, &s).unwrap();
            for j in 0..3 {
                let inner = (z[j] - s.sigma_hat(t) * eps[j]) / s.alpha_hat(t);
                assert!((inner - pm[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_arithmetic() {
        assert_eq!(distance(array![[1.0, 1.0]].view(), array![[0.0, 1.0]].view()), 0.5);
    }

    #[test]
    fn identical_branches_zero_loss() {
        let s = sched();
        let m = DenoiserModel::with_random_params(arch(2), 4, 0.3).unwrap();
        let z = array![[0.3, -0.7]];
        let (loss, g) = consistency_loss(&m, &m, z.view(), &[30], z.view(), &[30], &cond(1), &params(), &s).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = sched();
        let student = DenoiserModel::with_random_params(arch(2), 5, 0.4).unwrap();
        let target = DenoiserModel::with_random_params(arch(2), 6, 0.4).unwrap();
        let z_src = array![[0.3, -0.7], [1.1, 0.2]];
        let z_tgt = array![[0.2, -0.5], [0.9, 0.4]];
        let (ts, tt) = ([40, 71], [30, 61]);
        let c = cond(2);
        let p = params();
        let (_, g) = consistency_loss(&student, &target, z_src.view(), &ts, z_tgt.view(), &tt, &c, &p, &s).unwrap();
        let h = 1e-5;
        for i in 0..student.params().len() {
            let eval = |d: f64| {
                let mut m = student.clone();
                m.params_mut()[i] += d;
                consistency_loss(&m, &target, z_src.view(), &ts, z_tgt.view(), &tt, &c, &p, &s).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs analytic {an}");
        }
    }

    fn state(mu: f64, seed: u64) -> LcdTrainState<OraclePredictor> {
        let s = sched();
        let teacher = OraclePredictor::new(GaussianOracle::standard(2), s);
        let student = DenoiserModel::new(arch(2), 2).unwrap();
        LcdTrainState::new(student, teacher, Optimizer::adam(), LrSchedule::constant(1e-3), mu, 0.3, 10, params(), seed).unwrap()
    }

    fn data() -> LatentBatch {
        let task = SyntheticTask::new(DataSpec::Gaussian(GaussianOracle::standard(2)), 3, 3, 3, 1).unwrap();
        sample_dataset(&task, 32, 3).unwrap()
    }

    #[test]
    fn ema_extremes() {
        let s = sched();
        let d = data();
        let mut frozen = state(1.0, 1);
        let before = frozen.target.param_hash();
        frozen.distill_step(&d, &s).unwrap();
        assert_eq!(frozen.target.param_hash(), before);
        assert_ne!(frozen.student.param_hash(), before);
        let mut copy = state(0.0, 1);
        copy.distill_step(&d, &s).unwrap();
        assert_eq!(copy.target.params(), copy.student.params());
    }

    #[test]
    fn distill_deterministic() {
        let s = sched();
        let d = data();
        let run = || {
            let mut st = state(0.95, 8);
            let l: Vec<f64> = (0..5).map(|_| st.distill_step(&d, &s).unwrap()).collect();
            (l, st.student.param_hash(), st.target.param_hash())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn t_out_of_range_rejected() {
        let s = sched();
        let st = state(0.95, 1);
        let z = array![[0.1, 0.2]];
        assert!(st.lcd_loss(z.view(), &[91], &cond(1), &s).is_err());
        assert!(st.lcd_loss(z.view(), &[0], &cond(1), &s).is_err());
        assert!(st.lcd_loss(z.view(), &[90], &cond(1), &s).is_ok());
    }

    #[test]
    fn nan_batch_leaves_state() {
        let s = sched();
        let mut d = data();
        let mut st = state(0.95, 1);
        st.distill_step(&d, &s).unwrap();
        let (a, b) = (st.student.param_hash(), st.target.param_hash());
        d.z[[3, 1]] = f64::NAN;
        assert!(st.distill_step(&d, &s).is_err());
        assert_eq!((st.student.param_hash(), st.target.param_hash(), st.step), (a, b, 1));
    }

    #[test]
    fn bad_config_rejected() {
        let s = sched();
        let teacher = OraclePredictor::new(GaussianOracle::standard(2), s);
        let m = DenoiserModel::new(arch(2), 2).unwrap();
        let mk = |mu, k| LcdTrainState::new(m.clone(), teacher.clone(), Optimizer::sgd(), LrSchedule::constant(1e-3), mu, 0.3, k, params(), 1);
        assert!(mk(1.2, 10).is_err());
        assert!(mk(0.5, 0).is_err());
        assert!(mk(0.5, 100).is_err());
        assert!(ConsistencyParams::new(0.0, 10.0, 100).is_err());
    }
}

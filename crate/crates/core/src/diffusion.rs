//! Teacher machinery: forward noising, the noise-space MSE objective with
//! condition dropout, and the ancestral sampler.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::denoiser::{Condition, DenoiserModel, Gradients, LrSchedule, Optimizer};
use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::rng::{self, Generator};
use crate::schedule::NoiseSchedule;
use crate::synthdata::LatentBatch;

/// `α̂_t z_0 + σ̂_t ε`, row-wise.
pub fn forward_sample(z0: ArrayView2<f64>, t: &[usize], eps: ArrayView2<f64>, s: &NoiseSchedule) -> Result<Array2<f64>> {
    if z0.dim() != eps.dim() || t.len() != z0.nrows() {
        return Err(Error::Shape(format!("z0 {:?}, eps {:?}, {} steps", z0.dim(), eps.dim(), t.len())));
    }
    for &ti in t {
        s.check(ti)?;
    }
    let mut out = z0.to_owned();
    for ((mut row, e), &ti) in out.rows_mut().into_iter().zip(eps.rows()).zip(t) {
        let (a, sg) = (s.alpha_hat(ti), s.sigma_hat(ti));
        Zip::from(&mut row).and(&e).for_each(|z, &e| *z = a * *z + sg * e);
    }
    Ok(out)
}

/// Mean over rows and coordinates of `(ε − ε̂)²`, with its gradient w.r.t. `ε̂`.
pub fn noise_mse(eps: ArrayView2<f64>, eps_hat: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = eps.len() as f64;
    let diff = &eps_hat - &eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Loss and gradients for explicit `(t, ε, dropout)` draws.
pub fn teacher_loss(
    model: &DenoiserModel,
    batch: &LatentBatch,
    t: &[usize],
    eps: ArrayView2<f64>,
    dropped: &[bool],
    s: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    let z_t = forward_sample(batch.z.view(), t, eps, s)?;
    let cond: Vec<Condition> =
        batch.cond.iter().zip(dropped).map(|(c, &d)| if d { Condition::null() } else { c.clone() }).collect();
    let (eps_hat, cache) = model.eval(z_t.view(), t, &cond)?;
    let (loss, grad) = noise_mse(eps, eps_hat.view());
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("teacher loss is {loss}")));
    }
    Ok((loss, model.backward(&cache, grad.view())?))
}

#[derive(Debug, Clone)]
pub struct TeacherTrainState {
    pub model: DenoiserModel,
    pub optimizer: Optimizer,
    pub lr: LrSchedule,
    pub p_uncond: f64,
    pub step: u64,
    rng: Generator,
    rows_seen: u64,
    rows_dropped: u64,
}

impl TeacherTrainState {
    pub fn new(model: DenoiserModel, optimizer: Optimizer, lr: LrSchedule, p_uncond: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1], got {p_uncond}")));
        }
        Ok(Self {
            model,
            optimizer,
            lr,
            p_uncond,
            step: 0,
            rng: rng::stream(seed, rng::streams::TEACHER),
            rows_seen: 0,
            rows_dropped: 0,
        })
    }

    /// Observed fraction of rows whose condition was replaced by ∅.
    pub fn dropout_rate(&self) -> f64 {
        if self.rows_seen == 0 {
            0.0
        } else {
            self.rows_dropped as f64 / self.rows_seen as f64
        }
    }

    fn draw(&self, rng: &mut Generator, batch: &LatentBatch, s: &NoiseSchedule) -> (Vec<usize>, Array2<f64>, Vec<bool>) {
        let n = batch.len();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=s.steps())).collect();
        let eps = rng::normal_matrix(rng, n, batch.dim());
        let dropped: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < self.p_uncond).collect();
        (t, eps, dropped)
    }

    /// Samples `t ~ U{1..T}`, `ε ~ N(0, I)` and dropout per row, returning the
    /// loss and exact gradients. The state is left unchanged on divergence.
    pub fn loss_step(&mut self, batch: &LatentBatch, s: &NoiseSchedule) -> Result<(f64, Gradients)> {
        let mut rng = self.rng.clone();
        let (t, eps, dropped) = self.draw(&mut rng, batch, s);
        let out = teacher_loss(&self.model, batch, &t, eps.view(), &dropped, s)?;
        self.rng = rng;
        self.rows_seen += batch.len() as u64;
        self.rows_dropped += dropped.iter().filter(|&&d| d).count() as u64;
        Ok(out)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &LatentBatch, s: &NoiseSchedule) -> Result<f64> {
        let snapshot = (self.rng.clone(), self.rows_seen, self.rows_dropped);
        let (loss, grads) = self.loss_step(batch, s)?;
        let lr = self.lr.at(self.step);
        if let Err(e) = self.model.update(&grads, &mut self.optimizer, lr) {
            (self.rng, self.rows_seen, self.rows_dropped) = snapshot;
            return Err(e);
        }
        self.step += 1;
        Ok(loss)
    }
}

/// One reverse step from `t` to `t − 1`:
/// `z_{t−1} = (z_t − β_t/σ̂_t · ε̂) / √α_t + σ_t · noise`, with `σ_t = √β_t`
/// and the noise term dropped at `t = 1`.
pub fn ancestral_step<P: NoisePredictor + ?Sized>(
    m: &P,
    z_t: ArrayView2<f64>,
    t: usize,
    cond: &[Condition],
    s: &NoiseSchedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: s.steps() });
    }
    s.check(t)?;
    if noise.dim() != z_t.dim() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", noise.dim(), z_t.dim())));
    }
    let ts = vec![t; z_t.nrows()];
    let eps = m.predict(z_t, &ts, cond)?;
    let alpha = s.alpha(t);
    let coef = (1.0 - alpha) / s.sigma_hat(t);
    let sigma = if t == 1 { 0.0 } else { s.beta(t).sqrt() };
    let inv = 1.0 / alpha.sqrt();
    let mut out = z_t.to_owned();
    Zip::from(&mut out).and(&eps).and(&noise).for_each(|z, &e, &n| *z = inv * (*z - coef * e) + sigma * n);
    Ok(out)
}

/// Full `T`-step chain from `z_T ~ N(0, I)`, one sample per condition.
pub fn ancestral_sample<P: NoisePredictor + ?Sized>(m: &P, cond: &[Condition], s: &NoiseSchedule, seed: u64) -> Result<Array2<f64>> {
    let mut g = rng::stream(seed, rng::streams::SAMPLE);
    let (n, d) = (cond.len(), m.latent_dim());
    let mut z = rng::normal_matrix(&mut g, n, d);
    for t in (1..=s.steps()).rev() {
        let noise = if t > 1 { rng::normal_matrix(&mut g, n, d) } else { Array2::zeros((n, d)) };
        z = ancestral_step(m, z.view(), t, cond, s, noise.view())?;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("ancestral chain produced non-finite values".into()));
    }
    Ok(z)
}

/// Per-row mean over coordinates; used by reporting code.
pub fn row_means(z: ArrayView2<f64>) -> Vec<f64> {
    z.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Arch;
    use crate::synthdata::{sample_dataset, DataSpec, GaussianOracle, SyntheticTask};
    use ndarray::array;

    struct Zero(usize);

    impl NoisePredictor for Zero {
        fn latent_dim(&self) -> usize {
            self.0
        }
        fn predict(&self, z: ArrayView2<f64>, _: &[usize], _: &[Condition]) -> Result<Array2<f64>> {
            Ok(Array2::zeros(z.dim()))
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.06).unwrap()
    }

    fn small_arch(dim: usize) -> Arch {
        Arch {
            latent_dim: dim,
            width: 16,
            depth: 2,
            content_dim: 4,
            f0_dim: 4,
            speaker_dim: 4,
            time_freqs: 3,
            time_dim: 8,
            steps: 100,
        }
    }

    #[test]
    fn mse_reduction() {
        let (loss, grad) = noise_mse(array![[1.0, 0.0]].view(), array![[0.0, 0.0]].view());
        assert_eq!(loss, 0.5);
        assert_eq!(grad, array![[-1.0, 0.0]]);
        let (zero, _) = noise_mse(array![[0.3, -2.0]].view(), array![[0.3, -2.0]].view());
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn forward_sample_endpoints() {
        let s = sched();
        let z0 = array![[2.0, -1.0]];
        let e = array![[0.5, 0.5]];
        let at0 = forward_sample(z0.view(), &[0], e.view(), &s).unwrap();
        assert_eq!(at0, z0);
        let at = forward_sample(z0.view(), &[100], e.view(), &s).unwrap();
        assert!((at[[0, 0]] - (s.alpha_hat(100) * 2.0 + s.sigma_hat(100) * 0.5)).abs() < 1e-15);
        assert!(forward_sample(z0.view(), &[101], e.view(), &s).is_err());
    }

    #[test]
    fn ancestral_collapse_and_last_step() {
        let s = sched();
        let z = array![[1.0, -3.0]];
        let noise = array![[5.0, 5.0]];
        let c = vec![Condition::null()];
        let out = ancestral_step(&Zero(2), z.view(), 50, &c, &s, Array2::zeros((1, 2)).view()).unwrap();
        assert!((out[[0, 0]] - 1.0 / s.alpha(50).sqrt()).abs() < 1e-14);
        let last = ancestral_step(&Zero(2), z.view(), 1, &c, &s, noise.view()).unwrap();
        assert!((last[[0, 1]] + 3.0 / s.alpha(1).sqrt()).abs() < 1e-14);
        assert!(ancestral_step(&Zero(2), z.view(), 0, &c, &s, noise.view()).is_err());
    }

    #[test]
    fn ancestral_sample_deterministic() {
        let s = sched();
        let m = crate::predictor::OraclePredictor::new(GaussianOracle::standard(2), s.clone());
        let c = vec![Condition::null(); 4];
        let a = ancestral_sample(&m, &c, &s, 9).unwrap();
        let b = ancestral_sample(&m, &c, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ancestral_sample(&m, &c, &s, 10).unwrap());
    }

    #[test]
    fn training_deterministic_and_decreasing() {
        let s = sched();
        let task = SyntheticTask::new(DataSpec::Gaussian(GaussianOracle::standard(2)), 4, 4, 6, 1).unwrap();
        let data = sample_dataset(&task, 256, 2).unwrap();
        let run = || {
            let m = DenoiserModel::new(small_arch(2), 3).unwrap();
            let mut st = TeacherTrainState::new(m, Optimizer::adam(), LrSchedule::constant(1e-3), 0.1, 4).unwrap();
            let mut losses = Vec::new();
            for _ in 0..200 {
                losses.push(st.train_step(&data, &s).unwrap());
            }
            (st.model.param_hash(), losses, st.dropout_rate())
        };
        let (h1, l1, rate) = run();
        let (h2, l2, _) = run();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        let head: f64 = l1[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = l1[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!((rate - 0.1).abs() < 0.03, "dropout rate {rate}");
    }

    #[test]
    fn divergence_leaves_state() {
        let s = sched();
        let task = SyntheticTask::new(DataSpec::Gaussian(GaussianOracle::standard(2)), 4, 4, 6, 1).unwrap();
        let mut data = sample_dataset(&task, 8, 2).unwrap();
        let m = DenoiserModel::new(small_arch(2), 3).unwrap();
        let mut st = TeacherTrainState::new(m, Optimizer::sgd(), LrSchedule::constant(1e-3), 0.1, 4).unwrap();
        st.train_step(&data, &s).unwrap();
        let before = st.model.param_hash();
        data.z[[0, 0]] = f64::NAN;
        assert!(matches!(st.train_step(&data, &s), Err(Error::Divergence(_))));
        assert_eq!(st.model.param_hash(), before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn p_uncond_range() {
        let m = DenoiserModel::new(small_arch(2), 3).unwrap();
        assert!(TeacherTrainState::new(m, Optimizer::sgd(), LrSchedule::constant(1e-3), 1.5, 4).is_err());
    }
}

//! Deterministic DDIM jumps and the guided distillation target.

use ndarray::{Array2, ArrayView2, Zip};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;

/// Applies one DDIM jump given an already computed noise estimate.
/// `t_to == t_from` is accepted and returns `z_from` up to rounding.
pub fn ddim_from_eps(
    z_from: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t_from: usize,
    t_to: usize,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let n = z_from.nrows();
    ddim_from_eps_rows(z_from, eps, &vec![t_from; n], &vec![t_to; n], s)
}

/// Row-wise [`ddim_from_eps`] with a separate step pair per row.
pub fn ddim_from_eps_rows(
    z_from: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t_from: &[usize],
    t_to: &[usize],
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if eps.dim() != z_from.dim() || t_from.len() != z_from.nrows() || t_to.len() != z_from.nrows() {
        return Err(Error::Shape(format!(
            "eps {:?}, latent {:?}, {} / {} steps",
            eps.dim(),
            z_from.dim(),
            t_from.len(),
            t_to.len()
        )));
    }
    let mut out = z_from.to_owned();
    for ((mut row, e), (&tf, &tt)) in out.rows_mut().into_iter().zip(eps.rows()).zip(t_from.iter().zip(t_to)) {
        s.check(tf)?;
        s.check(tt)?;
        if tt > tf {
            return Err(Error::Invalid(format!("DDIM must move backwards, got {tf} -> {tt}")));
        }
        let (a_from, s_from) = (s.alpha_hat(tf), s.sigma_hat(tf));
        let (a_to, s_to) = (s.alpha_hat(tt), s.sigma_hat(tt));
        Zip::from(&mut row).and(&e).for_each(|z, &e| {
            let x0 = (*z - s_from * e) / a_from;
            *z = a_to * x0 + s_to * e;
        });
    }
    Ok(out)
}

/// `Ψ(z, t_from → t_to, c)` with one batched denoiser call.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    m: &P,
    z_from: ArrayView2<f64>,
    t_from: usize,
    t_to: usize,
    cond: &[Condition],
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let n = z_from.nrows();
    ddim_step_rows(m, z_from, &vec![t_from; n], &vec![t_to; n], cond, s)
}

/// Row-wise [`ddim_step`].
pub fn ddim_step_rows<P: NoisePredictor + ?Sized>(
    m: &P,
    z_from: ArrayView2<f64>,
    t_from: &[usize],
    t_to: &[usize],
    cond: &[Condition],
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    for (&tf, &tt) in t_from.iter().zip(t_to) {
        if tt >= tf {
            return Err(Error::Invalid(format!("DDIM step needs t_to < t_from, got {tf} -> {tt}")));
        }
        s.check(tf)?;
    }
    let eps = m.predict(z_from, t_from, cond)?;
    ddim_from_eps_rows(z_from, eps.view(), t_from, t_to, s)
}

/// `(1 + ω)·cond − ω·uncond`.
pub fn combine_guidance(cond: ArrayView2<f64>, uncond: ArrayView2<f64>, omega: f64) -> Array2<f64> {
    let mut out = cond.to_owned();
    Zip::from(&mut out).and(&uncond).for_each(|c, &u| *c = (1.0 + omega) * *c - omega * u);
    out
}

/// Classifier-free guided jump: the conditional and null-conditioned DDIM
/// results are blended after the solver, not in noise space.
pub fn guided_target<P: NoisePredictor + ?Sized>(
    m: &P,
    z_from: ArrayView2<f64>,
    t_from: usize,
    t_to: usize,
    cond: &[Condition],
    omega: f64,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let n = z_from.nrows();
    guided_target_rows(m, z_from, &vec![t_from; n], &vec![t_to; n], cond, omega, s)
}

/// Row-wise [`guided_target`].
pub fn guided_target_rows<P: NoisePredictor + ?Sized>(
    m: &P,
    z_from: ArrayView2<f64>,
    t_from: &[usize],
    t_to: &[usize],
    cond: &[Condition],
    omega: f64,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if cond.iter().any(|c| c.is_null) {
        return Err(Error::Invalid("guided target needs a concrete condition".into()));
    }
    let with_cond = ddim_step_rows(m, z_from, t_from, t_to, cond, s)?;
    if omega == 0.0 {
        return Ok(with_cond);
    }
    let nulls = vec![Condition::null(); cond.len()];
    let without = ddim_step_rows(m, z_from, t_from, t_to, &nulls, s)?;
    Ok(combine_guidance(with_cond.view(), without.view(), omega))
}

/// Chains `ddim_step` from `t_start` down to `t_end` in jumps of at most `k`.
pub fn ddim_chain<P: NoisePredictor + ?Sized>(
    m: &P,
    z: ArrayView2<f64>,
    t_start: usize,
    t_end: usize,
    k: usize,
    cond: &[Condition],
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::Invalid("DDIM chain needs k >= 1".into()));
    }
    let mut z = z.to_owned();
    let mut t = t_start;
    while t > t_end {
        let next = t.saturating_sub(k).max(t_end);
        z = ddim_step(m, z.view(), t, next, cond, s)?;
        t = next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::OraclePredictor;
    use crate::synthdata::GaussianOracle;
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

    // Distinct conditional / unconditional outputs.
    struct Split;

    impl NoisePredictor for Split {
        fn latent_dim(&self) -> usize {
            2
        }
        fn predict(&self, z: ArrayView2<f64>, _: &[usize], c: &[Condition]) -> Result<Array2<f64>> {
            let mut out = z.to_owned();
            for (mut row, ci) in out.rows_mut().into_iter().zip(c) {
                let k = if ci.is_null { -0.7 } else { 0.4 };
                row.mapv_inplace(|v| k * v + 0.1);
            }
            Ok(out)
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.06).unwrap()
    }

    fn conds(n: usize) -> Vec<Condition> {
        vec![Condition::new(vec![0.0], vec![3], vec![1.0]); n]
    }

    #[test]
    fn zero_eps_rescales() {
        let s = sched();
        let z = array![[1.0, -2.0]];
        let out = ddim_step(&Zero(2), z.view(), 40, 10, &conds(1), &s).unwrap();
        let r = s.alpha_hat(10) / s.alpha_hat(40);
        assert!((out[[0, 0]] - r).abs() < 1e-14);
        assert!((out[[0, 1]] + 2.0 * r).abs() < 1e-14);
    }

    #[test]
    fn equal_steps_identity() {
        let s = sched();
        let z = array![[0.3, -1.1]];
        let e = array![[0.9, 0.2]];
        let out = ddim_from_eps(z.view(), e.view(), 37, 37, &s).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_forward_jump() {
        let s = sched();
        let z = array![[0.0, 0.0]];
        assert!(ddim_step(&Zero(2), z.view(), 10, 10, &conds(1), &s).is_err());
        assert!(ddim_step(&Zero(2), z.view(), 10, 20, &conds(1), &s).is_err());
        assert!(ddim_step(&Zero(2), z.view(), 101, 20, &conds(1), &s).is_err());
    }

    #[test]
    fn guidance_zero_is_plain_step() {
        let s = sched();
        let z = array![[0.5, -0.25], [1.0, 2.0]];
        let plain = ddim_step(&Split, z.view(), 60, 50, &conds(2), &s).unwrap();
        let g = guided_target(&Split, z.view(), 60, 50, &conds(2), 0.0, &s).unwrap();
        assert_eq!(plain, g);
    }

    #[test]
    fn guidance_matches_hand_combination() {
        let s = sched();
        let z = array![[0.5, -0.25]];
        let g = guided_target(&Split, z.view(), 60, 50, &conds(1), 0.3, &s).unwrap();
        // recompute both branches by hand
        let (af, sf, at, st) = (s.alpha_hat(60), s.sigma_hat(60), s.alpha_hat(50), s.sigma_hat(50));
        for j in 0..2 {
            let zj = z[[0, j]];
            let branch = |k: f64| {
                let e = k * zj + 0.1;
                at * (zj - sf * e) / af + st * e
            };
            let want = 1.3 * branch(0.4) - 0.3 * branch(-0.7);
            assert!((g[[0, j]] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn guidance_cancels_for_condition_blind_model() {
        let s = sched();
        let z = array![[0.5, -0.25]];
        let plain = ddim_step(&Zero(2), z.view(), 60, 50, &conds(1), &s).unwrap();
        let g = guided_target(&Zero(2), z.view(), 60, 50, &conds(1), 2.5, &s).unwrap();
        for (a, b) in plain.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn guidance_affine_in_omega() {
        let s = sched();
        let z = array![[0.5, -0.25]];
        let at = |w| guided_target(&Split, z.view(), 60, 50, &conds(1), w, &s).unwrap();
        let (a, b, c) = (at(0.1), at(0.3), at(0.5));
        for j in 0..2 {
            assert!((b[[0, j]] - 0.5 * (a[[0, j]] + c[[0, j]])).abs() < 1e-13);
        }
    }

    #[test]
    fn null_condition_rejected() {
        let s = sched();
        let z = array![[0.5, -0.25]];
        assert!(guided_target(&Split, z.view(), 60, 50, &[Condition::null()], 0.3, &s).is_err());
    }

    #[test]
    fn oracle_chain_tracks_flow() {
        let s = sched();
        let oracle = GaussianOracle::standard(3);
        let m = OraclePredictor::new(oracle.clone(), s.clone());
        let z = array![[1.2, -0.4, 0.05]];
        let fine = ddim_chain(&m, z.view(), 100, 0, 1, &conds(1), &s).unwrap();
        let coarse = ddim_chain(&m, z.view(), 100, 0, 10, &conds(1), &s).unwrap();
        let exact = oracle.flow(&z.row(0).to_vec(), 100, 0, &s).unwrap();
        let err = |a: &Array2<f64>| {
            let num: f64 = a.row(0).iter().zip(&exact).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            num / exact.iter().map(|y| y * y).sum::<f64>().sqrt()
        };
        assert!(err(&fine) < 1e-2);
        assert!(err(&fine) < err(&coarse));
    }
}

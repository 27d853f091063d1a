use super::*;
use crate::rng;

fn small_arch() -> Arch {
    Arch {
        latent_dim: 3,
        width: 6,
        depth: 2,
        content_dim: 2,
        f0_dim: 3,
        speaker_dim: 2,
        time_freqs: 2,
        time_dim: 4,
        steps: 10,
    }
}

fn conditions(seed: u64, n: usize, with_null: bool) -> Vec<Condition> {
    let mut g = rng::generator(seed);
    (0..n)
        .map(|i| {
            if with_null && i % 3 == 1 {
                Condition::null()
            } else {
                Condition::new(rng::normal_vec(&mut g, 2), vec![(10 + 7 * i) as u8, 200, 0], rng::normal_vec(&mut g, 2))
            }
        })
        .collect()
}

fn probe_loss(m: &DenoiserModel, z: &Array2<f64>, t: &[usize], c: &[Condition], probe: &Array2<f64>) -> f64 {
    (m.eval(z.view(), t, c).unwrap().0 * probe).sum()
}

#[test]
fn zero_output_layer_predicts_zero() {
    let m = DenoiserModel::new(small_arch(), 3).unwrap();
    let mut g = rng::generator(4);
    let z = rng::normal_matrix(&mut g, 5, 3);
    let (out, _) = m.eval(z.view(), &[1, 2, 5, 9, 10], &conditions(1, 5, true)).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_is_deterministic() {
    let m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let mut g = rng::generator(5);
    let z = rng::normal_matrix(&mut g, 4, 3);
    let c = conditions(2, 4, true);
    let a = m.eval(z.view(), &[1, 3, 7, 10], &c).unwrap().0;
    let b = m.eval(z.view(), &[1, 3, 7, 10], &c).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn construction_is_seed_deterministic() {
    assert_eq!(DenoiserModel::new(small_arch(), 9).unwrap(), DenoiserModel::new(small_arch(), 9).unwrap());
    assert_ne!(DenoiserModel::new(small_arch(), 9).unwrap(), DenoiserModel::new(small_arch(), 10).unwrap());
}

#[test]
fn shape_errors() {
    let m = DenoiserModel::new(small_arch(), 3).unwrap();
    let z = Array2::zeros((2, 4));
    assert!(matches!(m.eval(z.view(), &[1, 1], &conditions(1, 2, false)), Err(Error::Shape(_))));
    let z = Array2::zeros((2, 3));
    assert!(matches!(m.eval(z.view(), &[1], &conditions(1, 2, false)), Err(Error::Shape(_))));
    assert!(matches!(m.eval(z.view(), &[1, 11], &conditions(1, 2, false)), Err(Error::StepOutOfRange { .. })));
    let bad = vec![Condition::new(vec![0.0; 5], vec![1], vec![0.0; 2]); 2];
    assert!(matches!(m.eval(z.view(), &[1, 2], &bad), Err(Error::Shape(_))));
}

#[test]
fn null_condition_ignores_payload() {
    let m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let z = Array2::from_elem((1, 3), 0.3);
    let mut junk = Condition::new(vec![9.0; 7], vec![3; 4], vec![1.0]);
    junk.is_null = true;
    let a = m.eval(z.view(), &[4], &[Condition::null()]).unwrap().0;
    let b = m.eval(z.view(), &[4], &[junk]).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let mut g = rng::generator(6);
    let z = rng::normal_matrix(&mut g, 3, 3);
    let (_, cache) = m.eval(z.view(), &[2, 4, 6], &conditions(3, 3, true)).unwrap();
    let grads = m.backward(&cache, Array2::zeros((3, 3)).view()).unwrap();
    assert!(grads.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn stale_or_mismatched_cache_is_rejected() {
    let mut m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let z = Array2::zeros((2, 3));
    let (_, cache) = m.eval(z.view(), &[2, 4], &conditions(3, 2, false)).unwrap();
    assert!(matches!(m.backward(&cache, Array2::zeros((3, 3)).view()), Err(Error::StaleCache(_))));
    m.params_mut()[0] += 1.0;
    assert!(matches!(m.backward(&cache, Array2::zeros((2, 3)).view()), Err(Error::StaleCache(_))));
}

#[test]
fn unused_f0_rows_get_no_gradient() {
    let m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let mut g = rng::generator(7);
    let z = rng::normal_matrix(&mut g, 3, 3);
    let c = conditions(4, 3, false);
    let used: std::collections::BTreeSet<u8> = c.iter().flat_map(|c| c.f0_bins.iter().copied()).collect();
    let (_, cache) = m.eval(z.view(), &[1, 5, 9], &c).unwrap();
    let grads = m.backward(&cache, rng::normal_matrix(&mut g, 3, 3).view()).unwrap();
    let table = grads.get("f0_table").unwrap();
    for (bin, row) in table.rows().into_iter().enumerate() {
        let nonzero = row.iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, used.contains(&(bin as u8)), "bin {bin}");
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut m = DenoiserModel::with_random_params(small_arch(), 11, 0.4).unwrap();
    let mut g = rng::generator(8);
    let z = rng::normal_matrix(&mut g, 4, 3);
    let t = [1, 4, 7, 10];
    let c = conditions(5, 4, true);
    let probe = rng::normal_matrix(&mut g, 4, 3);
    let (_, cache) = m.eval(z.view(), &t, &c).unwrap();
    let grads = m.backward(&cache, probe.view()).unwrap();
    let analytic = grads.as_slice().to_vec();
    let h = 1e-5;
    for (i, a) in analytic.iter().enumerate() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let lp = probe_loss(&m, &z, &t, &c, &probe);
        m.params_mut()[i] = orig - h;
        let lm = probe_loss(&m, &z, &t, &c, &probe);
        m.params_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        assert!(rel < 1e-4, "param {i}: analytic {a} numeric {numeric}");
    }
}

#[test]
fn update_and_ema() {
    let mut m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let before = m.clone();
    let mut grads = Gradients::zeros_like(&m);
    grads.data.iter_mut().for_each(|g| *g = 1.0);
    m.update(&grads, &mut Optimizer::sgd(), 0.0).unwrap();
    assert_eq!(m, before);
    m.update(&grads, &mut Optimizer::sgd(), 0.5).unwrap();
    for (a, b) in m.params().iter().zip(before.params()) {
        assert!((a - (b - 0.5)).abs() < 1e-12);
    }
    grads.data[3] = f64::NAN;
    let snapshot = m.clone();
    assert!(matches!(m.update(&grads, &mut Optimizer::sgd(), 0.5), Err(Error::Divergence(_))));
    assert_eq!(m, snapshot);

    let mut target = before.clone();
    target.ema_from(&m, 1.0).unwrap();
    assert_eq!(target, before);
    target.ema_from(&m, 0.0).unwrap();
    assert_eq!(target, m);
}

#[test]
fn tensor_round_trip_rebuilds_model() {
    let m = DenoiserModel::with_random_params(small_arch(), 3, 0.5).unwrap();
    let tensors: Vec<_> = m.tensors().map(|(s, d)| (s.name.as_str(), (s.rows, s.cols), d)).collect();
    let back = DenoiserModel::from_tensors(small_arch(), tensors.clone()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.param_hash(), m.param_hash());
    assert!(DenoiserModel::from_tensors(small_arch(), tensors[1..].to_vec()).is_err());
}

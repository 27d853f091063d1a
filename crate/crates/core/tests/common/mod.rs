#![allow(dead_code)]

use lcd_core::denoiser::{Arch, Condition, DenoiserModel};
use lcd_core::rng;
use ndarray::Array2;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn arch(latent_dim: usize, width: usize, depth: usize, steps: usize) -> Arch {
    Arch {
        latent_dim,
        width,
        depth,
        content_dim: 3,
        f0_dim: 2,
        speaker_dim: 3,
        time_freqs: 2,
        time_dim: 4,
        steps,
    }
}

/// Random conditions; every third row is ∅ when `with_null` is set.
pub fn conditions(a: &Arch, n: usize, with_null: bool, seed: u64) -> Vec<Condition> {
    let mut g = rng::generator(seed);
    (0..n)
        .map(|i| {
            if with_null && i % 3 == 2 {
                Condition::null()
            } else {
                let bins = (0..4).map(|j| ((37 * i + 61 * j + seed as usize) % 256) as u8).collect();
                Condition::new(rng::normal_vec(&mut g, a.content_dim), bins, rng::normal_vec(&mut g, a.speaker_dim))
            }
        })
        .collect()
}

pub fn noise(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    rng::normal_matrix(&mut rng::generator(seed), rows, cols)
}

pub fn random_model(a: Arch, seed: u64) -> DenoiserModel {
    DenoiserModel::with_random_params(a, seed, 0.3).unwrap()
}

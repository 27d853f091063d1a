//! Seeded randomness.
//!
//! All stochastic code draws from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! from a `u64` via `SeedableRng::seed_from_u64`. Independent consumers of the
//! same seed use distinct ChaCha stream ids so their draws never overlap.
//! Gaussian draws use the `rand_distr::StandardNormal` ziggurat sampler.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Generator = ChaCha8Rng;

/// Stream ids partitioning one seed between subsystems.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SINGERS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const MONITOR: u64 = 7;
    pub const BATCH: u64 = 8;
    pub const CONDITIONS: u64 = 9;
}

pub fn generator(seed: u64) -> Generator {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Generator {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    g.set_stream(stream);
    g
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Row-major fill, so the draw order is independent of memory layout.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

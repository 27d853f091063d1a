//! The noise-prediction interface shared by trained networks and oracles.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};

use crate::denoiser::{Condition, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::synthdata::GaussianOracle;

pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;

    /// `ε(z_t, t, c)` for every row.
    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<Array2<f64>>;
}

impl NoisePredictor for DenoiserModel {
    fn latent_dim(&self) -> usize {
        self.arch().latent_dim
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<Array2<f64>> {
        Ok(self.eval(z, t, cond)?.0)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<Array2<f64>> {
        (**self).predict(z, t, cond)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<Array2<f64>> {
        (**self).predict(z, t, cond)
    }
}

/// Exact `E[ε | z_t]` for Gaussian data. Conditions are ignored.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub oracle: GaussianOracle,
    pub schedule: NoiseSchedule,
}

impl OraclePredictor {
    pub fn new(oracle: GaussianOracle, schedule: NoiseSchedule) -> Self {
        Self { oracle, schedule }
    }
}

impl NoisePredictor for OraclePredictor {
    fn latent_dim(&self) -> usize {
        self.oracle.dim()
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], _cond: &[Condition]) -> Result<Array2<f64>> {
        if z.ncols() != self.oracle.dim() || t.len() != z.nrows() {
            return Err(Error::Shape(format!("oracle got {:?} with {} steps", z.dim(), t.len())));
        }
        let mut out = Array2::zeros(z.dim());
        for (i, (row, &ti)) in z.rows().into_iter().zip(t).enumerate() {
            let e = self.oracle.eps(&row.to_vec(), ti, &self.schedule)?;
            out.row_mut(i).assign(&ndarray::Array1::from(e));
        }
        Ok(out)
    }
}

/// Counts predictor invocations and evaluated rows.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    inner: P,
    calls: AtomicUsize,
    rows: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0), rows: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Row evaluations, i.e. per-sample denoiser calls summed over samples.
    pub fn rows(&self) -> usize {
        self.rows.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
        self.rows.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<Array2<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.rows.fetch_add(z.nrows(), Ordering::Relaxed);
        self.inner.predict(z, t, cond)
    }
}

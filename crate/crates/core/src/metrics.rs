//! Latent-space distribution metrics used in place of audio quality scores.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthdata::{GaussianOracle, SyntheticTask};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl Moments {
    pub fn of_oracle(o: &GaussianOracle) -> Self {
        Self { mean: Array1::from(o.mean().to_vec()), cov: Array2::from_diag(&Array1::from(o.var().to_vec())) }
    }

    /// Equal-weight mixture moments.
    pub fn of_mixture(components: &[GaussianOracle]) -> Self {
        let w = 1.0 / components.len() as f64;
        let d = components[0].dim();
        let mut mean = Array1::zeros(d);
        let mut second = Array2::zeros((d, d));
        for c in components {
            let m = Moments::of_oracle(c);
            mean.scaled_add(w, &m.mean);
            let outer = outer(&m.mean);
            second.scaled_add(w, &(&m.cov + &outer));
        }
        let cov = second - outer(&mean);
        Self { mean, cov }
    }
}

fn outer(v: &Array1<f64>) -> Array2<f64> {
    let col = v.view().insert_axis(Axis(1));
    let row = v.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Sample mean and unbiased covariance.
pub fn sample_moments(x: ArrayView2<f64>) -> Result<Moments> {
    if x.nrows() < 2 {
        return Err(Error::Invalid("moments need at least two samples".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (x.nrows() - 1) as f64;
    Ok(Moments { mean, cov })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentErrors {
    /// `‖μ̂ − μ‖ / sqrt(tr Σ)`.
    pub mean: f64,
    /// `‖Σ̂ − Σ‖_F / ‖Σ‖_F`.
    pub cov: f64,
    /// `‖μ̂ − μ‖² + ‖Σ̂ − Σ‖_F²`.
    pub squared: f64,
}

pub fn moment_errors(est: &Moments, reference: &Moments) -> Result<MomentErrors> {
    if est.mean.len() != reference.mean.len() {
        return Err(Error::Shape(format!("dimension {} vs reference {}", est.mean.len(), reference.mean.len())));
    }
    let dm = &est.mean - &reference.mean;
    let dc = &est.cov - &reference.cov;
    let mean_sq = dm.dot(&dm);
    let cov_sq = dc.iter().map(|v| v * v).sum::<f64>();
    let cov_norm = reference.cov.iter().map(|v| v * v).sum::<f64>().sqrt();
    let trace = reference.cov.diag().sum();
    Ok(MomentErrors { mean: mean_sq.sqrt() / trace.sqrt(), cov: cov_sq.sqrt() / cov_norm, squared: mean_sq + cov_sq })
}

/// Per-coordinate worst cases: `max |μ̂_j − μ_j|` and `max |v̂_j / v_j − 1|`.
pub fn coordinate_errors(x: ArrayView2<f64>, reference: &GaussianOracle) -> Result<(f64, f64)> {
    let m = sample_moments(x)?;
    if m.mean.len() != reference.dim() {
        return Err(Error::Shape("dimension mismatch".into()));
    }
    let mean = m.mean.iter().zip(reference.mean()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let var = m.cov.diag().iter().zip(reference.var()).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
    Ok((mean, var))
}

/// Mean over components of the squared moment error of the rows labelled
/// with that component.
pub fn conditional_error(x: ArrayView2<f64>, labels: &[usize], task: &SyntheticTask) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    if x.ncols() != task.dim() {
        return Err(Error::Shape(format!("dimension {} vs task {}", x.ncols(), task.dim())));
    }
    let mut total = 0.0;
    for k in 0..task.num_components() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        let est = sample_moments(x.select(Axis(0), &rows).view())?;
        total += moment_errors(&est, &Moments::of_oracle(task.oracle(k)))?.squared;
    }
    Ok(total / task.num_components() as f64)
}

/// Index of the nearest component mean (Euclidean).
pub fn nearest_component(row: &[f64], components: &[GaussianOracle]) -> usize {
    let d2 = |c: &GaussianOracle| c.mean().iter().zip(row).map(|(m, x)| (m - x) * (m - x)).sum::<f64>();
    (0..components.len()).min_by(|&a, &b| d2(&components[a]).total_cmp(&d2(&components[b]))).unwrap_or(0)
}

/// Fraction of rows nearest to their labelled component.
pub fn assignment_accuracy(x: ArrayView2<f64>, labels: &[usize], components: &[GaussianOracle]) -> f64 {
    let hits = x.rows().into_iter().zip(labels).filter(|(r, &k)| nearest_component(&r.to_vec(), components) == k).count();
    hits as f64 / x.nrows().max(1) as f64
}

/// Per-coordinate standardized differences between two samples: Welch z for
/// means and the z-score of the log variance ratio (normal-theory variance
/// `2/(n−1)` per log sample variance).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleStats {
    pub mean_z: Vec<f64>,
    pub logvar_z: Vec<f64>,
}

impl TwoSampleStats {
    pub fn max_abs(&self) -> f64 {
        self.mean_z.iter().chain(&self.logvar_z).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn count(&self) -> usize {
        self.mean_z.len() + self.logvar_z.len()
    }
}

pub fn two_sample_stats(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<TwoSampleStats> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("dimension {} vs {}", a.ncols(), b.ncols())));
    }
    let (ma, mb) = (sample_moments(a)?, sample_moments(b)?);
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let mut mean_z = Vec::new();
    let mut logvar_z = Vec::new();
    for j in 0..a.ncols() {
        let (va, vb) = (ma.cov[[j, j]], mb.cov[[j, j]]);
        mean_z.push((ma.mean[j] - mb.mean[j]) / (va / na + vb / nb).sqrt());
        logvar_z.push((va / vb).ln() / (2.0 / (na - 1.0) + 2.0 / (nb - 1.0)).sqrt());
    }
    Ok(TwoSampleStats { mean_z, logvar_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn mixture_moments_by_hand() {
        let a = GaussianOracle::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let b = GaussianOracle::new(vec![-1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let m = Moments::of_mixture(&[a, b]);
        assert_eq!(m.mean, array![0.0, 0.0]);
        assert!((m.cov[[0, 0]] - 1.5).abs() < 1e-15);
        assert!((m.cov[[1, 1]] - 0.5).abs() < 1e-15);
        assert_eq!(m.cov[[0, 1]], 0.0);
    }

    #[test]
    fn exact_moments_zero_error() {
        let x = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let m = sample_moments(x.view()).unwrap();
        let e = moment_errors(&m, &m).unwrap();
        assert_eq!((e.mean, e.cov, e.squared), (0.0, 0.0, 0.0));
        assert!((m.cov[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_scale() {
        let reference = Moments { mean: array![0.0, 0.0], cov: Array2::eye(2) };
        let est = Moments { mean: array![0.3, 0.4], cov: Array2::eye(2) * 0.9 };
        let e = moment_errors(&est, &reference).unwrap();
        assert!((e.mean - 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!((e.cov - 0.1).abs() < 1e-12);
        assert!((e.squared - (0.25 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn self_sample_within_bands() {
        let o = GaussianOracle::standard(4);
        let mut g = rng::generator(3);
        let x = rng::normal_matrix(&mut g, 20000, 4);
        let e = moment_errors(&sample_moments(x.view()).unwrap(), &Moments::of_oracle(&o)).unwrap();
        assert!(e.mean < 0.02 && e.cov < 0.05, "{e:?}");
        let y = rng::normal_matrix(&mut g, 20000, 4);
        assert!(two_sample_stats(x.view(), y.view()).unwrap().max_abs() < 4.0);
        let shifted = y.mapv(|v| 1.2 * v);
        assert!(two_sample_stats(x.view(), shifted.view()).unwrap().max_abs() > 10.0);
    }

    #[test]
    fn assignment() {
        let comps = [GaussianOracle::new(vec![2.0], vec![1.0]).unwrap(), GaussianOracle::new(vec![-2.0], vec![1.0]).unwrap()];
        let x = array![[1.0], [-0.5], [3.0], [0.1]];
        assert_eq!(assignment_accuracy(x.view(), &[0, 1, 0, 1], &comps), 0.75);
    }
}

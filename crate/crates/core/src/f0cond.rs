//! F0 conditioning: voiced-mean pitch shift and log-F0 quantization.
//!
//! A frame is voiced iff its F0 is strictly positive. Quantization uses
//! 256 bins: bin 0 is reserved for unvoiced frames and the 255 voiced bins
//! are uniform in log-Hz over `[F0_MIN_HZ, F0_MAX_HZ]`.

use crate::error::{Error, Result};

pub const F0_BINS: usize = 256;
pub const UNVOICED_BIN: u8 = 0;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 1100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour(Vec<f64>);

impl F0Contour {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("F0 contour needs at least one frame".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("F0 values must be finite and >= 0, got {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn voiced_mask(&self) -> Vec<bool> {
        self.0.iter().map(|&f| f > 0.0).collect()
    }
}

/// Mean F0 over voiced frames.
pub fn voiced_mean(c: &F0Contour) -> Result<f64> {
    let (sum, n) = c.values().iter().filter(|&&f| f > 0.0).fold((0.0, 0usize), |(s, n), &f| (s + f, n + 1));
    if n == 0 {
        return Err(Error::Invalid("contour has no voiced frames".into()));
    }
    Ok(sum / n as f64)
}

/// Scale voiced frames so their mean becomes `tar_voiced_mean`.
pub fn shift_f0(src: &F0Contour, tar_voiced_mean: f64) -> Result<F0Contour> {
    if !(tar_voiced_mean > 0.0 && tar_voiced_mean.is_finite()) {
        return Err(Error::Invalid(format!("target voiced mean must be > 0, got {tar_voiced_mean}")));
    }
    let ratio = tar_voiced_mean / voiced_mean(src)?;
    Ok(F0Contour(src.values().iter().map(|&f| if f > 0.0 { f * ratio } else { 0.0 }).collect()))
}

pub fn quantize_hz(f: f64) -> u8 {
    if f.is_nan() || f <= 0.0 {
        return UNVOICED_BIN;
    }
    let pos = (f.ln() - F0_MIN_HZ.ln()) / (F0_MAX_HZ.ln() - F0_MIN_HZ.ln());
    let bin = 1.0 + (255.0 * pos).floor();
    bin.clamp(1.0, 255.0) as u8
}

pub fn quantize_logf0(c: &F0Contour) -> Vec<u8> {
    c.values().iter().map(|&f| quantize_hz(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contour(v: &[f64]) -> F0Contour {
        F0Contour::new(v.to_vec()).unwrap()
    }

    #[test]
    fn voiced_mean_examples() {
        assert_eq!(voiced_mean(&contour(&[100.0, 100.0, 100.0])).unwrap(), 100.0);
        assert_eq!(voiced_mean(&contour(&[0.0, 100.0, 300.0, 0.0])).unwrap(), 200.0);
        assert!(voiced_mean(&contour(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn shift_examples() {
        let src = contour(&[200.0, 150.0, 250.0]);
        let out = shift_f0(&src, 300.0).unwrap();
        for (a, b) in src.values().iter().zip(out.values()) {
            assert!((b - a * 1.5).abs() < 1e-12);
        }
        assert_eq!(shift_f0(&src, 200.0).unwrap(), src);
        let out = shift_f0(&contour(&[0.0, 100.0, 300.0, 0.0]), 400.0).unwrap();
        assert_eq!(out.values(), &[0.0, 200.0, 600.0, 0.0]);
        assert!(shift_f0(&contour(&[0.0]), 300.0).is_err());
        assert!(shift_f0(&src, 0.0).is_err());
    }

    #[test]
    fn rejects_invalid_contours() {
        assert!(F0Contour::new(vec![]).is_err());
        assert!(F0Contour::new(vec![-1.0]).is_err());
        assert!(F0Contour::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize_hz(0.0), 0);
        assert_eq!(quantize_hz(F0_MIN_HZ), 1);
        assert_eq!(quantize_hz(10.0), 1);
        assert_eq!(quantize_hz(F0_MAX_HZ), 255);
        assert_eq!(quantize_hz(5000.0), 255);
        assert_eq!(quantize_hz((F0_MIN_HZ * F0_MAX_HZ).sqrt()), 128);
    }

    proptest! {
        #[test]
        fn shift_preserves_mask_and_hits_target(
            vals in prop::collection::vec(prop_oneof![Just(0.0), 40.0f64..900.0], 1..40),
            target in 60.0f64..800.0,
        ) {
            prop_assume!(vals.iter().any(|&v| v > 0.0));
            let src = F0Contour::new(vals).unwrap();
            let out = shift_f0(&src, target).unwrap();
            prop_assert_eq!(src.voiced_mask(), out.voiced_mask());
            let m = voiced_mean(&out).unwrap();
            prop_assert!(((m - target) / target).abs() < 1e-9);
        }

        #[test]
        fn quantization_is_monotone(a in 1e-3f64..5000.0, b in 1e-3f64..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_hz(lo) <= quantize_hz(hi));
            prop_assert!(quantize_hz(lo) >= 1);
        }
    }
}

use lcd_core::schedule::NoiseSchedule;
use proptest::prelude::*;

/// ᾱ_100 for β linear in 1e-4..0.06, evaluated at 50 digits.
const ALPHA_BAR_100: f64 = 0.046547033593805198651857842618498500705559906995564;

#[test]
fn alpha_bar_matches_high_precision_product() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.06).unwrap();
    assert!((s.alpha_bar(100) - ALPHA_BAR_100).abs() < 1e-12);
}

#[test]
fn betas_are_linear_with_exact_endpoints() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.06).unwrap();
    let b = s.betas();
    assert_eq!(b.len(), 100);
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(100), 0.06);
    let step = (0.06 - 1e-4) / 99.0;
    for t in 1..=100 {
        assert!((s.beta(t) - (1e-4 + (t - 1) as f64 * step)).abs() < 1e-15);
    }
}

#[test]
fn alpha_bar_agrees_with_log_space_product() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.06).unwrap();
    let mut log = 0.0;
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=100 {
        log += (-s.beta(t)).ln_1p();
        assert!((s.alpha_bar(t) - log.exp()).abs() < 1e-12, "t = {t}");
    }
}

proptest! {
    #[test]
    fn variance_preserving_identity(steps in 2usize..400, lo in 1e-6f64..1e-3, span in 1e-3f64..0.5) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        for t in 0..=steps {
            let a = s.alpha_hat(t);
            let g = s.sigma_hat(t);
            prop_assert!((a * a + g * g - 1.0).abs() < 1e-12);
            if t > 0 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }
}

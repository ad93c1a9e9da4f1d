use nmsloss::gradcheck::{check_grads, fd_gradient, FDConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn linear_functions_recover_their_coefficients(coef in prop::collection::vec(-100.0..100.0f64, 1..8), x0 in -10.0..10.0f64) {
        let cfg = FDConfig::default();
        let x = vec![x0; coef.len()];
        let f = |p: &[f64]| p.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
        let g = fd_gradient(f, &x, &cfg).unwrap();
        let scale = coef.iter().map(|c| c.abs()).fold(0.0, f64::max) * (1.0 + x0.abs() * coef.len() as f64);
        for (gi, ci) in g.iter().zip(&coef) {
            // rounding in f(x +- h) is amplified by 1/h
            prop_assert!((gi - ci).abs() <= 10.0 * f64::EPSILON * scale / cfg.h, "{} vs {}", gi, ci);
        }
    }
}

#[test]
fn fd_examples() {
    let cfg = FDConfig::default();
    assert_eq!(fd_gradient(|_| 3.0, &[1.0, 2.0], &cfg).unwrap(), vec![0.0, 0.0]);
    let g = fd_gradient(|p| p[0] * p[0] + p[1] * p[1], &[1.0, 2.0], &cfg).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    let err = fd_gradient(|p| if p[1] > 2.0 { f64::NAN } else { 0.0 }, &[1.0, 2.0], &cfg).unwrap_err();
    assert!(err.to_string().contains('1'), "{err}");
}

#[test]
fn check_grads_examples() {
    let cfg = FDConfig::default();
    assert!(check_grads(&[1.0, -2.0], &[1.0, -2.0], &cfg).unwrap().passed);
    let c = check_grads(&[1.0], &[1.1], &cfg).unwrap();
    assert!(!c.passed);
    assert_eq!(c.worst_index, Some(0));
    assert!(check_grads(&[1.0], &[1.0, 2.0], &cfg).is_err());
}

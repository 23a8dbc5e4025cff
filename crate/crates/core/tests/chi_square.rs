use lqac::inference::{chi2_cdf, chi2_quantile};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn cdf_agrees_with_statrs() {
    for dof in [1usize, 2, 3, 5, 6, 10, 30] {
        let reference = ChiSquared::new(dof as f64).unwrap();
        for x in [0.01, 0.5, 1.0, 3.0, 7.5, 20.0, 60.0] {
            assert!(
                (chi2_cdf(x, dof) - reference.cdf(x)).abs() < 1e-12,
                "dof {dof}, x {x}"
            );
        }
    }
}

#[test]
fn quantile_agrees_with_statrs() {
    for dof in [1usize, 2, 6, 12] {
        let reference = ChiSquared::new(dof as f64).unwrap();
        for p in [0.01, 0.5, 0.9, 0.95, 0.99, 0.999] {
            let q = chi2_quantile(dof, p).unwrap();
            assert!(
                (q - reference.inverse_cdf(p)).abs() < 1e-6 * q.max(1.0),
                "dof {dof}, p {p}"
            );
        }
    }
}

#[test]
fn tabulated_critical_values() {
    assert!((chi2_quantile(2, 0.95).unwrap() - 5.9915).abs() < 1e-4);
    assert!((chi2_quantile(6, 0.95).unwrap() - 12.5916).abs() < 1e-4);
    assert!(chi2_quantile(2, 1.0).is_err());
    assert!(chi2_quantile(0, 0.5).is_err());
}

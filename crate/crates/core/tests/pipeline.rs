use std::io::Write;

use nalgebra::DMatrix;
use varcomp_core::simlab::{generate, ScenarioSpec};
use varcomp_core::*;

fn dental() -> Dataset {
    load_dataset(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/dental.csv")).unwrap()
}

#[test]
fn dental_layout() {
    let d = dental();
    assert_eq!(d.n(), 27);
    assert_eq!(d.balanced_j().unwrap(), 4);
    assert_eq!(d.individuals[0].x, vec![8.0, 10.0, 12.0, 14.0]);
}

#[test]
fn csv_rows_are_grouped_and_sorted() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "id,x,y\nb,2,5\na,1,1\nb,1,4\na,2,2").unwrap();
    let d = load_dataset(f.path()).unwrap();
    assert_eq!(d.individuals[0].id, "b");
    assert_eq!(d.individuals[0].y, vec![4.0, 5.0]);
    assert_eq!(d.individuals[1].x, vec![1.0, 2.0]);
}

#[test]
fn malformed_csv_is_rejected() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "id,x,y\na,1,oops").unwrap();
    assert!(matches!(load_dataset(f.path()), Err(Error::Load(_))));
    let mut g = tempfile::NamedTempFile::new().unwrap();
    writeln!(g, "id,t,y\na,1,2").unwrap();
    assert!(load_dataset(g.path()).is_err());
}

#[test]
fn dental_tests_match_published_decisions() {
    let d = dental();
    let h = HypothesisSpec::from_one_based(&[2]).unwrap();
    let diag = run_test(&ModelSpec::linear(2, CovStructure::Diagonal).unwrap(), &d, &h, None, &TestOptions::default()).unwrap();
    assert!((diag.lrt - 3.651).abs() < 0.01);
    assert_eq!(diag.weights.weights, vec![0.5, 0.5]);
    assert!(diag.reject);
    let full = run_test(&ModelSpec::linear(2, CovStructure::Full).unwrap(), &d, &h, None, &TestOptions::default()).unwrap();
    assert!((full.lrt - 4.178).abs() < 0.01);
    assert_eq!(full.weights.weights, vec![0.0, 0.5, 0.5]);
    assert!(!full.reject);
    // The alternative contains the null, so its likelihood is at least as large.
    assert!(full.fits.1.loglik >= full.fits.0.loglik);
}

#[test]
fn report_roundtrips_through_json() {
    let d = dental();
    let h = HypothesisSpec::new(vec![1]);
    let r = run_test(&ModelSpec::linear(2, CovStructure::Diagonal).unwrap(), &d, &h, None, &TestOptions::default()).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    let back: TestReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.lrt, r.lrt);
    assert_eq!(back.fits.1.theta_hat, r.fits.1.theta_hat);
}

#[test]
fn tested_first_effect_matches_tested_last_after_reordering() {
    // Testing the intercept variance of (intercept, slope) through the
    // internal permutation gives a finite report in the original order.
    let d = dental();
    let h = HypothesisSpec::new(vec![0]);
    let r = run_test(&ModelSpec::linear(2, CovStructure::Diagonal).unwrap(), &d, &h, None, &TestOptions::default()).unwrap();
    assert_eq!(r.tested, vec![1]);
    assert_eq!(r.fits.0.theta_hat.gamma[(0, 0)], 0.0);
    assert!(r.fits.0.theta_hat.gamma[(1, 1)] > 0.0);
    assert!(r.lrt > 0.0);
}

#[test]
fn information_is_symmetric_positive_definite() {
    let spec = ScenarioSpec::m1(2, CovStructure::Full, &[1], true).unwrap();
    let model = spec.model_spec().unwrap();
    let data = generate(&ScenarioSpec { n: 50, ..spec.clone() }, 0).unwrap();
    let info = fim_linear(&spec.null_theta(), &model, &data).unwrap();
    assert_eq!(info.q(), model.q());
    assert!((&info.matrix - info.matrix.transpose()).amax() < 1e-12);
    assert!(info.matrix.clone().cholesky().is_some());
}

#[test]
fn correlation_extraction_for_two_tested_variances() {
    let spec = ScenarioSpec::m1(3, CovStructure::Diagonal, &[1, 2], false).unwrap();
    let model = spec.model_spec().unwrap();
    let data = generate(&ScenarioSpec { n: 20, ..spec.clone() }, 0).unwrap();
    let mut theta = spec.null_theta();
    // Interior point so the information is finite in every direction.
    theta.gamma[(1, 1)] = 0.5;
    theta.gamma[(2, 2)] = 0.25;
    let info = fim_linear(&theta, &model, &data).unwrap();
    let r = selection_matrix(3, 2, &CovStructure::Diagonal).unwrap();
    let (v, c) = extract_correlation(&info, &r).unwrap();
    assert_eq!(v.nrows(), 2);
    assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    assert!(c[(0, 1)].abs() < 1.0);
    let w = weights_closed_form(&c).unwrap();
    assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn nonlinear_test_runs_on_small_logistic_data() {
    let mut spec = ScenarioSpec::m2(2, CovStructure::Diagonal, false, 0.0).unwrap();
    spec.n = 40;
    let data = generate(&spec, 0).unwrap();
    let model = spec.model_spec().unwrap();
    let mc = McConfig::new(256, 3);
    let r = run_test(&model, &data, &spec.h, Some(&mc), &TestOptions::default()).unwrap();
    assert!(r.lrt >= 0.0 && r.lrt.is_finite());
    assert_eq!(r.weights.weights, vec![0.5, 0.5]);
    assert!((0.0..=1.0).contains(&r.pvalue));
}

#[test]
fn quadratic_model_fits() {
    let mut spec = ScenarioSpec::m1(2, CovStructure::Diagonal, &[1], false).unwrap();
    spec.n = 30;
    let data = generate(&spec, 0).unwrap();
    let model = ModelSpec::quadratic(2, CovStructure::Diagonal).unwrap();
    let f = fit(&model, &data, None, Some(&McConfig::new(256, 1)), None).unwrap();
    assert!(f.loglik.is_finite());
    assert!(f.theta_hat.sigma2 > 0.0);
}

#[test]
fn simulated_statistic_is_nonnegative() {
    let v = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.0]);
    for seed in 0..20 {
        assert!(chibar_sample_stat(&Cone::orthant(2), &v, seed).unwrap() >= 0.0);
    }
}

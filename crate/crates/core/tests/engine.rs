mod common;

use std::sync::Arc;

use common::{interacted_design, max_rel_diff, ols_hc0, rel_close};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use xpe::frame::ClusterIds;
use xpe::sim::{ClusterSpec, PropensitySpec};
use xpe::*;

fn fixture(n: usize, seed: u64, tau: f64, rho: f64) -> sim::SimData {
    let mut c = SimConfig::ab(n, tau, seed);
    c.rho = rho;
    generate(&c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn full_compliance_reduces_to_ols(n in 20usize..300, seed in any::<u64>(), tau in -3.0f64..3.0, rho in -0.9f64..0.9) {
        let d = fixture(n, seed, tau, rho);
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x"])).unwrap();
        let model = fit_2sls(&input, classify_design(&d.frame)).unwrap();
        let x = d.frame.covariates().get("x").map(|c| (0..n).map(|i| match c.value(i) {
            frame::CovValue::Num(v) => v,
            _ => unreachable!(),
        }).collect::<Vec<f64>>()).unwrap();
        let design = interacted_design(&d.frame, &[&x]);
        let y = DVector::from_column_slice(d.frame.metric("y").unwrap());
        let (beta, cov) = ols_hc0(&design, &y, &DVector::from_element(n, 1.0));
        for i in 0..4 {
            prop_assert!(rel_close(model.beta(0)[i], beta[i], 1e-10));
        }
        prop_assert!(max_rel_diff(model.cov(0), &cov) < 1e-10);
    }

    #[test]
    fn singleton_clusters_match_robust(n in 20usize..300, seed in any::<u64>()) {
        let d = fixture(n, seed, 1.0, 0.5);
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x"])).unwrap();
        let model = fit_2sls(&input, classify_design(&d.frame)).unwrap();
        let labels: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let clustered = sandwich_cov(&model, &ClusterIds::from_labels(&labels)).unwrap();
        prop_assert!(max_rel_diff(&clustered[0], model.cov(0)) < 1e-10);
    }

    #[test]
    fn weight_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut c = SimConfig::ab(200, 1.0, seed);
        c.propensity = PropensitySpec::Logistic { intercept: 0.0, slope: 1.0 };
        let d = generate(&c).unwrap();
        let design = classify_design(&d.frame);
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x"])).unwrap();
        let base = fit_2sls(&input, design).unwrap();
        let mut data = (*input.data).clone();
        data.weights *= scale;
        let scaled = ModelInput { data: Arc::new(data), y: Arc::clone(&input.y) };
        let other = fit_2sls(&scaled, design).unwrap();
        prop_assert!((base.beta(0) - other.beta(0)).abs().max() < 1e-9 * base.beta(0).abs().max().max(1.0));
        prop_assert!(max_rel_diff(base.cov(0), other.cov(0)) < 1e-9);
    }
}

#[test]
fn ipw_matches_weighted_oracle() {
    let mut c = SimConfig::ab(500, 1.0, 4);
    c.propensity = PropensitySpec::Logistic { intercept: 0.3, slope: 0.8 };
    let d = generate(&c).unwrap();
    let design = classify_design(&d.frame);
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::default()).unwrap();
    let model = fit_2sls(&input, design).unwrap();
    assert_eq!(model.weight_scheme(), design::WeightScheme::InverseAssignmentProbability);
    let n = d.frame.n();
    let w = DVector::from_fn(n, |i, _| {
        let p = d.frame.propensity()[i];
        if d.frame.assignment()[i] == 1 { 1.0 / p } else { 1.0 / (1.0 - p) }
    });
    let x = interacted_design(&d.frame, &[]);
    let y = DVector::from_column_slice(d.frame.metric("y").unwrap());
    let (beta, cov) = ols_hc0(&x, &y, &w);
    assert!(rel_close(model.beta(0)[1], beta[1], 1e-10));
    assert!(max_rel_diff(model.cov(0), &cov) < 1e-10);
}

#[test]
fn first_stage_residuals_are_orthogonal_to_instruments() {
    let mut c = SimConfig::ab(400, 1.0, 11);
    c.compliance = 0.6;
    let d = generate(&c).unwrap();
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x"])).unwrap();
    let model = fit_2sls(&input, classify_design(&d.frame)).unwrap();
    let z = &model.data().instruments;
    let r = model.first_stage_residuals();
    let v = model.data().moment_weights();
    let mut cross = DMatrix::zeros(z.ncols(), r.ncols());
    for i in 0..z.nrows() {
        cross += v[i] * z.row(i).transpose() * r.row(i);
    }
    assert!(cross.abs().max() < 1e-8);
    assert_eq!(model.estimand(), "LATE");
}

#[test]
fn late_equals_wald_ratio() {
    for seed in 0..10 {
        let mut c = SimConfig::ab(2000, 1.0, seed);
        c.compliance = 2.0 / 3.0;
        c.selection_shift = 0.5;
        let d = generate(&c).unwrap();
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::default()).unwrap();
        let model = fit_2sls(&input, classify_design(&d.frame)).unwrap();
        let wald = oracle_wald(&d.frame, "y").unwrap();
        assert!(rel_close(model.beta(0)[1], wald, 1e-10), "{} vs {wald}", model.beta(0)[1]);
    }
}

#[test]
fn sur_matches_per_metric_fits() {
    let mut c = SimConfig::ab(600, 1.0, 3);
    c.metrics = 4;
    c.segments = 3;
    c.clusters = Some(ClusterSpec { count: 40, icc: 0.3 });
    let d = generate(&c).unwrap();
    let design = classify_design(&d.frame);
    let spec = CovariateSpec::new(&["x", "seg"]);
    let names = ["y1", "y2", "y3", "y4"];
    let (input, _) = add_metric(&d.frame, &names, &spec).unwrap();
    let sur = fit_sur(&input, design).unwrap();
    for (j, m) in names.iter().enumerate() {
        let (single, _) = add_metric(&d.frame, &[m], &spec).unwrap();
        let one = fit_2sls(&single, design).unwrap();
        assert!((sur.beta(j) - one.beta(0)).abs().max() < 1e-10);
        assert!(max_rel_diff(sur.cov(j), one.cov(0)) < 1e-10);
    }
}

#[test]
fn compression_matches_dense_fit() {
    for clustered in [false, true] {
        let mut c = SimConfig::ab(3000, 0.5, 8);
        c.metrics = 2;
        c.segments = 4;
        if clustered {
            c.clusters = Some(ClusterSpec { count: 50, icc: 0.2 });
        }
        let d = generate(&c).unwrap();
        let design = classify_design(&d.frame);
        let spec = CovariateSpec::new(&["seg"]);
        let (input, _) = add_metric(&d.frame, &["y1", "y2"], &spec).unwrap();
        let dense = fit_sur(&input, design).unwrap();
        let compressed = compress_design(&input);
        assert!(compressed.unique_rows() < input.data.rows() / 10);
        let small = fit_sur(&compressed, design).unwrap();
        for j in 0..2 {
            assert!((dense.beta(j) - small.beta(j)).abs().max() < 1e-10);
            assert!(max_rel_diff(dense.cov(j), small.cov(j)) < 1e-10);
        }
    }
}

#[test]
fn rank_deficiency_names_columns() {
    let d = fixture(100, 1, 1.0, 0.0);
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x"])).unwrap();
    let mut data = (*input.data).clone();
    let col = data.regressors.column(2).into_owned();
    data.regressors.set_column(3, &(col * 2.0));
    data.instruments.set_column(3, &data.regressors.column(3).into_owned());
    let broken = ModelInput { data: Arc::new(data), y: Arc::clone(&input.y) };
    match fit_2sls(&broken, classify_design(&d.frame)) {
        Err(Error::RankDeficient { columns, .. }) => assert!(columns.iter().any(|c| c == "x" || c == "T:x")),
        other => panic!("{other:?}"),
    }
}

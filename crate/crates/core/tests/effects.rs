mod common;

use common::rel_close;
use proptest::prelude::*;
use xpe::effects::{fixed_inference, InferenceOptions};
use xpe::frame::CovValue;
use xpe::*;

fn segmented(n: usize, segments: usize, seed: u64) -> sim::SimData {
    let mut c = SimConfig::ab(n, 1.0, seed);
    c.segments = segments;
    c.segment_effects = Some((0..segments).map(|s| 0.3 * s as f64).collect());
    c.rho = 0.5;
    generate(&c).unwrap()
}

fn seg_predicates(levels: usize) -> Vec<SegmentPredicate> {
    (0..levels)
        .map(|s| SegmentPredicate::parse(&format!("seg == 's{s:02}'")).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fixed_interval_inside_confidence_sequence(tau in -10.0f64..10.0, se in 1e-3f64..5.0, phi in 1e-2f64..10.0, alpha in 0.001f64..0.2) {
        let ((lo, hi), _) = fixed_inference(tau, se, alpha);
        let a = anytime_inference(tau, se, alpha, phi * phi).unwrap();
        prop_assert!(a.cs.0 <= lo && hi <= a.cs.1);
        prop_assert!((0.0..=1.0).contains(&a.p_anytime));
        // Duality: zero is inside the sequence exactly when p > α.
        let inside = a.cs.0 < 0.0 && 0.0 < a.cs.1;
        let margin = (a.p_anytime - alpha).abs() > 1e-9;
        prop_assert!(!margin || inside == (a.p_anytime > alpha));
    }

    #[test]
    fn anytime_p_monotone_in_effect(t1 in 0.0f64..5.0, dt in 0.0f64..5.0, se in 0.1f64..2.0, phi2 in 0.01f64..4.0) {
        let a = anytime_inference(t1, se, 0.05, phi2).unwrap();
        let b = anytime_inference(t1 + dt, se, 0.05, phi2).unwrap();
        let c = anytime_inference(-(t1 + dt), se, 0.05, phi2).unwrap();
        prop_assert!(b.p_anytime <= a.p_anytime + 1e-15);
        prop_assert!((b.p_anytime - c.p_anytime).abs() < 1e-15);
    }

    #[test]
    fn estimates_are_linear_in_coefficients(seed in any::<u64>()) {
        let d = segmented(400, 3, seed);
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x", "seg"])).unwrap();
        let model = fit_sur(&input, classify_design(&d.frame)).unwrap();
        let effects = infer_effect(&model, "y", &seg_predicates(3), InferenceOptions::default()).unwrap();
        for e in &effects {
            let c = e.contrast().unwrap();
            prop_assert!(rel_close(c.dot(&model.beta(0)), e.tau, 1e-12));
            prop_assert!(rel_close(c.dot(&(model.cov(0) * c)).sqrt(), e.se, 1e-10));
        }
    }
}

#[test]
fn saturated_segments_equal_difference_in_means() {
    for seed in 0..20 {
        let d = segmented(600, 4, seed);
        let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["seg"])).unwrap();
        let model = fit_sur(&input, classify_design(&d.frame)).unwrap();
        let preds = seg_predicates(4);
        let effects = infer_effect(&model, "y", &preds, InferenceOptions::default()).unwrap();
        let seg = d.frame.covariates().get("seg").unwrap();
        for (s, e) in effects.iter().enumerate() {
            let level = format!("s{s:02}");
            let mask: Vec<bool> = (0..d.frame.n())
                .map(|i| matches!(seg.value(i), CovValue::Str(v) if v == level))
                .collect();
            let (oracle, _) = oracle_diff_in_means(&d.frame, "y", Some(&mask)).unwrap();
            assert!(rel_close(e.tau, oracle, 1e-10), "seed {seed} segment {s}: {} vs {oracle}", e.tau);
            assert_eq!(e.n_segment, mask.iter().filter(|m| **m).count());
        }
    }
}

#[test]
fn frequency_weighted_projection_equals_full_sample() {
    let d = segmented(2000, 5, 7);
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["x", "seg"])).unwrap();
    let model = fit_sur(&input, classify_design(&d.frame)).unwrap();
    let preds = seg_predicates(5);
    let by_segment = infer_effect(&model, "y", &preds, InferenceOptions::default()).unwrap();
    let full = &infer_effect(&model, "y", &[], InferenceOptions::default()).unwrap()[0];
    let n = d.frame.n() as f64;
    let weights: Vec<(String, f64)> = preds
        .iter()
        .zip(&by_segment)
        .map(|(p, e)| (p.source().to_string(), e.n_segment as f64 / n))
        .collect();
    let projected = project_effects(&by_segment, &ProjectionSpec::new(&weights)).unwrap();
    assert!(rel_close(projected.tau, full.tau, 1e-10));
    assert!(rel_close(projected.se, full.se, 1e-10));
}

#[test]
fn two_segment_projection_arithmetic() {
    let d = segmented(1000, 2, 3);
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["seg"])).unwrap();
    let model = fit_sur(&input, classify_design(&d.frame)).unwrap();
    let preds = seg_predicates(2);
    let e = infer_effect(&model, "y", &preds, InferenceOptions::default()).unwrap();
    let spec = ProjectionSpec::new(&[(preds[0].source(), 0.2), (preds[1].source(), 0.8)]);
    let p = project_effects(&e, &spec).unwrap();
    assert_eq!(p.tau, 0.2 * e[0].tau + 0.8 * e[1].tau);
    // Disjoint segments of a saturated model have independent estimates.
    let se = (0.04 * e[0].se.powi(2) + 0.64 * e[1].se.powi(2)).sqrt();
    assert!(rel_close(p.se, se, 1e-10));
}

#[test]
fn anytime_is_wider_than_fixed_on_real_estimates() {
    let d = segmented(500, 2, 9);
    let (input, _) = add_metric(&d.frame, &["y"], &CovariateSpec::new(&["seg"])).unwrap();
    let model = fit_sur(&input, classify_design(&d.frame)).unwrap();
    for e in infer_effect(&model, "y", &seg_predicates(2), InferenceOptions::default()).unwrap() {
        assert!(e.cs.0 <= e.ci_fixed.0 && e.ci_fixed.1 <= e.cs.1);
        assert!(e.p_anytime >= e.p_fixed);
    }
}

use std::sync::OnceLock;

use ptq_core::calib::{calibrate, evaluate, first_last_convs, CalibConfig, CalibrationReport, QuantMode};
use ptq_core::compare::compare_schemes;
use ptq_core::exec::execute;
use ptq_core::quant::Granularity;
use ptq_core::range::Scheme;
use ptq_core::toy::{generate_toy, ToyBundle};
use ptq_core::{QuantError, SILU_LOWER_BOUND};

fn toy() -> &'static ToyBundle {
    static TOY: OnceLock<ToyBundle> = OnceLock::new();
    TOY.get_or_init(|| generate_toy(42))
}

fn config(scheme: Scheme, bits: u32) -> CalibConfig {
    let mut cfg = CalibConfig { weight_bits: bits, act_bits: bits, ..CalibConfig::default() };
    cfg.act_observer.scheme = scheme;
    cfg
}

#[test]
fn weights_only_leaves_activation_sentinels() {
    let t = toy();
    let cfg = CalibConfig { mode: QuantMode::WeightsOnly, ..config(Scheme::Uh, 4) };
    let cal = calibrate(&t.model, &t.weights, &t.calib[..8], &cfg).unwrap();
    for id in t.model.activation_points().into_iter().filter(|id| !cal.assignment.is_skipped(id)) {
        let q = &cal.assignment.nodes[id];
        assert!(q.act_qp.as_ref().unwrap().is_full_precision(), "{id}");
    }
    assert!(cal.assignment.nodes.values().filter_map(|q| q.weight_qp.as_ref()).all(|qp| qp.bits() == 4));
}

#[test]
fn activation_only_leaves_weight_sentinels() {
    let t = toy();
    let cfg = CalibConfig { mode: QuantMode::ActivationOnly, ..config(Scheme::MinMax, 4) };
    let cal = calibrate(&t.model, &t.weights, &t.calib[..8], &cfg).unwrap();
    assert!(cal.assignment.nodes.values().filter_map(|q| q.weight_qp.as_ref()).all(|qp| qp.is_full_precision()));
}

#[test]
fn uh_ranges_keep_the_fixed_lower_bound() {
    let t = toy();
    let cal = calibrate(&t.model, &t.weights, &t.calib, &config(Scheme::Uh, 8)).unwrap();
    let mut seen = 0;
    for n in cal.report.nodes.iter().filter(|n| n.bits < 32) {
        assert_eq!(n.range_lower, Some(SILU_LOWER_BOUND), "{}", n.node_id);
        assert!(n.uh_trace.is_some());
        seen += 1;
    }
    let expected = t.model.activation_points().into_iter().filter(|id| !cal.assignment.is_skipped(id)).count();
    assert_eq!(seen, expected);
}

#[test]
fn paper_policy_holds() {
    let t = toy();
    let cal = calibrate(&t.model, &t.weights, &t.calib[..8], &config(Scheme::Percentile, 6)).unwrap();
    let convs = t.model.conv_ids();
    let skip = first_last_convs(&t.model);
    assert!(skip.contains(convs[0]) && skip.contains(*convs.last().unwrap()));
    assert_eq!(cal.assignment.skip, skip);
    for (id, q) in &cal.assignment.nodes {
        if let Some(w) = &q.weight_qp {
            assert!(w.symmetric() && w.signed(), "{id}");
            assert_eq!(w.granularity(), Granularity::PerChannel { axis: 0 });
            assert!(w.zero_points().iter().all(|&z| z == 0));
        }
        if let Some(a) = &q.act_qp {
            assert_eq!(a.granularity(), Granularity::PerTensor);
        }
    }
    for id in &skip {
        assert!(!cal.assignment.nodes.contains_key(id));
    }
}

#[test]
fn full_precision_config_is_the_identity() {
    let t = toy();
    let cal = calibrate(&t.model, &t.weights, &t.calib[..4], &config(Scheme::Uh, 32)).unwrap();
    for x in &t.eval[..4] {
        let fp = execute(&t.model, &t.weights, x, None).unwrap();
        let q = execute(&t.model, &t.weights, x, Some(&cal.assignment)).unwrap();
        assert_eq!(fp, q);
    }
    let m = evaluate(&t.model, &t.weights, &cal.assignment, &t.eval).unwrap();
    assert_eq!(m.output_cosine, 1.0);
    assert_eq!(m.output_mse, 0.0);
}

#[test]
fn empty_calibration_set_is_rejected() {
    let t = toy();
    let err = calibrate(&t.model, &t.weights, &[], &CalibConfig::default()).unwrap_err();
    assert!(matches!(err, QuantError::EmptyCalibrationSet));
    let bad = CalibConfig { act_bits: 1, ..CalibConfig::default() };
    assert!(matches!(calibrate(&t.model, &t.weights, &t.calib, &bad), Err(QuantError::InvalidBits(1))));
}

#[test]
fn calibration_is_deterministic_and_reports_round_trip() {
    let t = toy();
    for scheme in Scheme::ALL {
        let cfg = config(scheme, 6);
        let a = calibrate(&t.model, &t.weights, &t.calib[..12], &cfg).unwrap();
        let b = calibrate(&t.model, &t.weights, &t.calib[..12], &cfg).unwrap();
        assert_eq!(a.assignment, b.assignment, "{scheme}");
        let mut report = a.report.clone();
        report.wall_time_ms = None;
        let json = report.to_json();
        let back = CalibrationReport::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json, "{scheme}");
        assert_eq!(back, report);
        let qa_json = serde_json::to_string(&a.assignment).unwrap();
        let qa: ptq_core::QuantAssignment = serde_json::from_str(&qa_json).unwrap();
        assert_eq!(qa, a.assignment);
    }
}

#[test]
fn error_grows_as_bits_shrink_and_audit_agrees() {
    let t = toy();
    let cmp = compare_schemes(&t.model, &t.weights, &t.calib, &t.eval, &[4, 6, 8], &CalibConfig::default(), true)
        .unwrap();
    for scheme in Scheme::ALL {
        let e = |b| cmp.row(scheme, b).unwrap().output_mse;
        assert!(e(8) <= e(6) && e(6) <= e(4), "{scheme}: {} {} {}", e(8), e(6), e(4));
    }
    let audit = cmp.audit.as_ref().unwrap();
    assert!(audit.passed(), "{audit:?}");
    assert!(audit.uh_checked > 0 && audit.mse_checked > 0 && audit.conv_checked > 0);
    let csv = cmp.to_csv();
    assert!(csv.starts_with("scheme,bits,output_mse,output_cosine,mean_sqnr_db\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * Scheme::ALL.len());
}

#[test]
fn full_precision_compare_rows_are_exact() {
    let t = toy();
    let cmp = compare_schemes(&t.model, &t.weights, &t.calib[..4], &t.eval[..4], &[32], &CalibConfig::default(), false)
        .unwrap();
    for r in &cmp.rows {
        assert_eq!(r.output_mse, 0.0);
        assert_eq!(r.output_cosine, 1.0);
    }
}

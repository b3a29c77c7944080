//! Public-API walk through a small network: margin, verdict, simulation and
//! certificate replay.

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use ncs_robust::analysis::{destabilization_certificate, ncs_robust_check, CertificateError, ResidueLedger};
use ncs_robust::sim::{self, SimConfig};
use ncs_robust::twoport::{scaled_identity, UncertaintyQuartet};
use ncs_robust::{margin, Channel, NetworkModel, SignalTrace, StateSpaceModel, Verdict};

fn integrator() -> StateSpaceModel {
    StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap()
}

fn network(radii: &[f64]) -> NetworkModel {
    let channels = radii.iter().enumerate().map(|(i, &r)| Channel::new(format!("ch{i}"), r)).collect();
    NetworkModel::new(integrator(), StateSpaceModel::scalar_gain(-1.0), channels).unwrap()
}

#[test]
fn verdicts_follow_arcsin_arithmetic() {
    // 45° − 2 · arcsin 0.2 ≈ 21.93°
    let rep = ncs_robust_check(&network(&[0.2, 0.2]));
    assert_eq!(rep.verdict, Verdict::RobustlyStable);
    assert_abs_diff_eq!(rep.residue.to_degrees(), 45.0 - 2.0 * 0.2f64.asin().to_degrees(), epsilon = 1e-9);
    assert_eq!(rep.splits.len(), 3);
    // 30° + 17.46° > 45°
    let rep = ncs_robust_check(&network(&[0.5, 0.3]));
    assert_eq!(rep.verdict, Verdict::NotGuaranteed);
    assert!(rep.residue < 0.0);
    let rep = ncs_robust_check(&network(&[]));
    assert_abs_diff_eq!(rep.residue, rep.arcsin_b, epsilon = 1e-15);
}

#[test]
fn unstable_loop_is_reported_as_such() {
    let net = NetworkModel::new(integrator(), StateSpaceModel::scalar_gain(0.0), vec![]).unwrap();
    let rep = ncs_robust_check(&net);
    assert_eq!(rep.verdict, Verdict::LoopUnstable);
    assert_eq!(rep.b, 0.0);
    assert!(matches!(destabilization_certificate(&net), Err(CertificateError::LoopUnstable)));
}

#[test]
fn ledger_agrees_with_batch_analysis() {
    let net = network(&[0.2, 0.2]);
    let rep = ncs_robust_check(&net);
    let mut ledger = ResidueLedger::new(rep.arcsin_b).unwrap();
    for ch in net.channels() {
        ledger.add(&ch.label, ch.r).unwrap();
    }
    assert_abs_diff_eq!(ledger.residue(), rep.residue, epsilon = 1e-12);
    ledger.modify("ch1", 0.5).unwrap();
    let rep = ncs_robust_check(&network(&[0.2, 0.5]));
    assert_abs_diff_eq!(ledger.residue(), rep.residue, epsilon = 1e-12);
}

#[test]
fn loop_signals_are_consistent_across_the_chain() {
    let quartets =
        vec![scaled_identity(0.1, 0.2, 1, 1).unwrap(), UncertaintyQuartet::rotation(0.2, 0, 1, 0.2, 1, 1).unwrap()];
    let channels = quartets.into_iter().enumerate().map(|(i, q)| Channel::with_quartet(format!("ch{i}"), q)).collect();
    let net = NetworkModel::new(integrator(), StateSpaceModel::scalar_gain(-1.0), channels).unwrap();
    let config = SimConfig { horizon: 400, ..SimConfig::default() };
    let inj = sim::probe_injection(2, &config, 3, 1, 0);
    let trace = sim::simulate_ncs(&net, 1, &inj, &config).unwrap();
    assert!(trace.max_loop_residual <= 1e-8, "{}", trace.max_loop_residual);
    let chain = net.concrete_chain().unwrap();
    // the plant-side signal at the last interface is the forward image of the first
    let forward = chain.forward(2, &trace.plant_side[0]).unwrap();
    let diff = forward.sub(&trace.plant_side[2]).unwrap().l2_norm();
    assert!(diff <= 1e-8 * trace.plant_side[2].l2_norm().max(1.0), "{diff}");
    let zero = SignalTrace::zeros(config.dt, 2, inj.horizon());
    let quiet = sim::simulate_ncs(&net, 0, &zero, &config).unwrap();
    assert!(quiet.output_stack().is_zero());
}

#[test]
fn stable_margin_bounds_the_simulated_projection() {
    let p = StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 1.0]).unwrap();
    let c = StateSpaceModel::static_gain(DMatrix::from_element(1, 1, -2.0));
    let b = margin::stability_margin(&p, &c);
    let net = NetworkModel::new(p, c, vec![]).unwrap();
    let est = sim::estimate_gain(&net, 0, 4, &SimConfig::default()).unwrap();
    assert!(est.blowup.is_none());
    // the loop maps d to two signals of norm at most ‖Π‖ and ‖I − Π‖ = ‖Π‖
    assert!(est.gain <= 2f64.sqrt() / b * 1.05, "{} vs {}", est.gain, 1.0 / b);
}

#[test]
fn certificate_replays_through_the_simulator() {
    let net = NetworkModel::new(
        StateSpaceModel::scalar_gain(2.0),
        StateSpaceModel::scalar_gain(0.0),
        vec![Channel::new("link", 0.5)],
    )
    .unwrap();
    let cert = destabilization_certificate(&net).unwrap();
    assert!(cert.final_angle.to_degrees() <= 2.0);
    let rows = sim::replay_certificate(net.plant(), net.controller(), &cert.replay_spec()).unwrap();
    for row in &rows {
        assert!((row.observed - row.predicted).abs() <= 0.1 * row.predicted, "{row:?}");
    }
    assert!(sim::growth(&rows) >= 10.0);
    for q in cert.quartets() {
        assert!(q.declared_bound() <= 0.5);
    }
}

//! Destabilization certificate for networks whose residue is not positive.
//!
//! The plant and controller graph directions `g`, `h` at ω = 0 span a plane.
//! Rank-one quartets rotate the plant direction toward `h`, stage by stage,
//! each by at most `arcsin r_k`. A sequence of such cascades leaves gaps
//! `ε_j` with `sin ε_j = sin θ · 2^{-j}`; injecting `β_j e` with `e ⊥ h`
//! splits into a plant-side part of size `β_j / sin ε_j`, so the projection
//! ratio grows without bound.

use nalgebra::{DVector, Matrix2, Vector2};
use thiserror::Error;

use super::{ncs_robust_check, NetworkModel, Verdict};
use crate::cone;
use crate::graphsym::{self, GraphError};
use crate::lti::{FrequencyGrid, LtiError};
use crate::margin;
use crate::signal::SignalTrace;
use crate::sim::{ReplaySpec, ReplayStep};
use crate::twoport::{TwoPortChain, TwoPortError, UncertaintyQuartet};

/// Largest final gap for which the angle counts as closed.
pub const CLOSING_TOLERANCE_DEG: f64 = 2.0;
/// Number of sequence steps.
pub const SEQUENCE_STEPS: usize = 5;
const DT: f64 = 0.01;
const HORIZON: usize = 2000;

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("residue {residue:.6} rad is positive: robust stability holds, nothing to certify")]
    NotApplicable { residue: f64 },
    #[error("nominal loop is unstable; no margin to violate")]
    LoopUnstable,
    #[error("graph angle could only be closed to {:.3}°", .0.final_angle.to_degrees())]
    AngleShortfall(Box<Certificate>),
    #[error("graph directions are degenerate at ω = 0")]
    Degenerate,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    TwoPort(#[from] TwoPortError),
}

#[derive(Debug, Clone)]
pub struct CertificateStep {
    pub j: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Angle left between the perturbed plant direction and `h`.
    pub gap: f64,
    /// `‖m_j‖ / ‖ω_j‖ = α_j / β_j`.
    pub predicted_ratio: f64,
    pub quartets: Vec<UncertaintyQuartet>,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    /// Grid frequency where the graphs come closest, and that angle.
    pub omega_star: f64,
    pub theta_star: f64,
    /// Frequency used for the construction (real directions).
    pub omega: f64,
    /// Time-domain angle between the witness traces `m` and `n`.
    pub theta: f64,
    pub m: SignalTrace,
    pub n: SignalTrace,
    /// Time-domain angle between the fully perturbed `m` and `n` in the
    /// last sequence step.
    pub final_angle: f64,
    /// Common injection direction, orthogonal to `h` in the rotation plane.
    pub direction: DVector<f64>,
    pub steps: Vec<CertificateStep>,
    /// Channel bounds `r_k`, plant side first.
    pub radii: Vec<f64>,
    /// True when the angle could not be closed (near-violation witness).
    pub near_violation: bool,
}

impl Certificate {
    /// Quartets of the last step.
    pub fn quartets(&self) -> &[UncertaintyQuartet] {
        self.steps.last().map(|s| s.quartets.as_slice()).unwrap_or(&[])
    }

    /// `predicted_last / predicted_first`.
    pub fn growth(&self) -> f64 {
        match (self.steps.first(), self.steps.last()) {
            (Some(a), Some(b)) => b.predicted_ratio / a.predicted_ratio,
            _ => 0.0,
        }
    }

    /// Time-domain replay of the sequence with the injection at the
    /// controller-side interface.
    pub fn replay_spec(&self) -> ReplaySpec {
        ReplaySpec {
            stage: self.radii.len(),
            omega: self.omega,
            dt: self.m.dt(),
            horizon: self.m.horizon(),
            direction: self.direction.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| ReplayStep { beta: s.beta, predicted: s.predicted_ratio, quartets: s.quartets.clone() })
                .collect(),
        }
    }
}

fn unit_real(v: &DVector<num_complex::Complex64>) -> DVector<f64> {
    v.map(|c| c.re).normalize()
}

/// Rank-one cascade that rotates direction `c(0) = e1` by `total` toward
/// `e2`, spending at most `arcsin r_k` at stage `k`.
fn rotating_cascade(
    e1: &DVector<f64>,
    e2: &DVector<f64>,
    total: f64,
    radii: &[f64],
    m: usize,
    p: usize,
) -> Result<Vec<UncertaintyQuartet>, TwoPortError> {
    let dir = |psi: f64| e1 * psi.cos() + e2 * psi.sin();
    let mut psi = 0.0;
    let mut remaining = total.max(0.0);
    radii
        .iter()
        .map(|&r| {
            let phi = r.asin().min(remaining);
            remaining -= phi;
            let w = dir(psi);
            let target = dir(psi + phi) * phi.cos();
            psi += phi;
            let diff = &target - &w;
            let v = if diff.norm() > 0.0 { diff } else { e2.clone() };
            UncertaintyQuartet::rank_one(phi.sin(), &v, &w, r, m, p)
        })
        .collect()
}

/// Builds the ratio sequence of quartets and injections demonstrating that
/// no positive margin survives the channel bounds.
pub fn destabilization_certificate(network: &NetworkModel) -> Result<Certificate, CertificateError> {
    let report = ncs_robust_check(network);
    match report.verdict {
        Verdict::LoopUnstable => return Err(CertificateError::LoopUnstable),
        Verdict::RobustlyStable => return Err(CertificateError::NotApplicable { residue: report.residue }),
        Verdict::NotGuaranteed => {}
    }
    let (m, p) = network.partition();
    let fp = graphsym::normalized_rcf(network.plant())?;
    let fc = graphsym::inverse_graph_symbol(network.controller())?;

    let profile = margin::graph_angle_profile(&fp, &fc, &FrequencyGrid::default())?;
    let closest = profile.iter().min_by(|a, b| a.theta.total_cmp(&b.theta)).ok_or(CertificateError::Degenerate)?;
    let (omega_star, theta_star) = (closest.omega, closest.theta);

    let gp = fp.response(0.0)?;
    let gc = fc.response(0.0)?;
    let at_zero = margin::graph_angle_from_responses(0.0, &gp, &gc).ok_or(CertificateError::Degenerate)?;
    let (gz, hz) = cone::realify(&at_zero.g, &at_zero.h);
    let g = unit_real(&gz);
    let h = unit_real(&hz);
    let theta0 = g.dot(&h).clamp(-1.0, 1.0).acos();
    let (g, theta0) =
        if theta0 > std::f64::consts::FRAC_PI_2 { (-g, std::f64::consts::PI - theta0) } else { (g, theta0) };
    let ortho = &h - &g * g.dot(&h);
    if ortho.norm() < 1e-12 {
        return Err(CertificateError::Degenerate);
    }
    let e1 = g.clone();
    let e2 = ortho.normalize();

    let xg = cone::excitation_for(&gp, &g.map(|x| x.into())).ok_or(CertificateError::Degenerate)?;
    let xh = cone::excitation_for(&gc, &h.map(|x| x.into())).ok_or(CertificateError::Degenerate)?;
    let horizon = cone::sinusoid_horizon(0.0, DT, HORIZON);
    let mt = graphsym::windowed_point(&fp, &xg, 0.0, DT, horizon);
    let nt = graphsym::windowed_point(&fc, &xh, 0.0, DT, horizon);
    let theta = mt.angle(&nt).map_err(|_| CertificateError::Degenerate)?;

    let radii = network.radii();
    let budget: f64 = radii.iter().map(|r| r.asin()).sum();
    let floor = (theta0 - budget).max(0.0);
    // e ⊥ h inside the rotation plane
    let (c0, s0) = (theta0.cos(), theta0.sin());
    let direction = &e2 * c0 - &e1 * s0;

    let mut steps = Vec::with_capacity(SEQUENCE_STEPS);
    for j in 1..=SEQUENCE_STEPS {
        let gap = (theta0.sin() / 2f64.powi(j as i32)).asin().max(floor);
        let quartets = rotating_cascade(&e1, &e2, theta0 - gap, &radii, m, p)?;
        let psi = theta0 - gap;
        // [g_j, h] [a; c] = e in plane coordinates
        let basis = Matrix2::new(psi.cos(), c0, psi.sin(), s0);
        let coef = basis.lu().solve(&Vector2::new(-s0, c0)).ok_or(CertificateError::Degenerate)?;
        let predicted_ratio = coef[0].abs();
        let beta = 2f64.powi(j as i32);
        steps.push(CertificateStep { j, alpha: beta * predicted_ratio, beta, gap, predicted_ratio, quartets });
    }

    let last = steps.last().expect("at least one step");
    let chain = TwoPortChain::from_quartets(last.quartets.clone(), m, p)?;
    let moved = chain.forward(chain.len(), &mt)?;
    let final_angle = moved.angle(&nt).map_err(|_| CertificateError::Degenerate)?;
    let near_violation = final_angle > CLOSING_TOLERANCE_DEG.to_radians();
    let cert = Certificate {
        omega_star,
        theta_star,
        omega: 0.0,
        theta,
        m: mt,
        n: nt,
        final_angle,
        direction,
        steps,
        radii,
        near_violation,
    };
    if near_violation {
        Err(CertificateError::AngleShortfall(Box::new(cert)))
    } else {
        Ok(cert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Channel;
    use crate::lti::StateSpaceModel;
    use crate::sim;
    use crate::twoport::verify_gain_bound;
    use approx::assert_abs_diff_eq;

    fn static_network(r: f64) -> NetworkModel {
        NetworkModel::new(
            StateSpaceModel::scalar_gain(2.0),
            StateSpaceModel::scalar_gain(0.0),
            vec![Channel::new("c", r)],
        )
        .unwrap()
    }

    #[test]
    fn static_example_closes_and_grows() {
        let cert = destabilization_certificate(&static_network(0.5)).unwrap();
        // planar oracle: g = (1, 2)/√5, h = (0, 1), θ = arcsin(1/√5)
        let theta = (1.0 / 5f64.sqrt()).asin();
        assert_abs_diff_eq!(cert.theta, theta, epsilon = 1e-9);
        assert_abs_diff_eq!(cert.theta_star, theta, epsilon = 1e-9);
        assert!(cert.final_angle.to_degrees() < CLOSING_TOLERANCE_DEG);
        for s in &cert.steps {
            assert_abs_diff_eq!(s.predicted_ratio, 1.0 / s.gap.sin(), epsilon = 1e-9);
            assert_abs_diff_eq!(s.alpha / s.beta, s.predicted_ratio, epsilon = 1e-9);
        }
        assert!(cert.growth() >= 10.0);
        for q in cert.quartets() {
            assert!(verify_gain_bound(q, 50, 1) <= 0.5 + 1e-9);
        }
        let rows = sim::replay_certificate(
            &StateSpaceModel::scalar_gain(2.0),
            &StateSpaceModel::scalar_gain(0.0),
            &cert.replay_spec(),
        )
        .unwrap();
        for row in &rows {
            assert!((row.observed - row.predicted).abs() <= 1e-6 * row.predicted);
        }
        assert!(sim::growth(&rows) >= 10.0);
    }

    #[test]
    fn positive_residue_is_not_applicable() {
        assert!(matches!(
            destabilization_certificate(&static_network(0.2)),
            Err(CertificateError::NotApplicable { .. })
        ));
    }

    #[test]
    fn two_channels_share_the_rotation() {
        let net = NetworkModel::new(
            StateSpaceModel::scalar_gain(2.0),
            StateSpaceModel::scalar_gain(0.0),
            vec![Channel::new("a", 0.3), Channel::new("b", 0.3)],
        )
        .unwrap();
        let cert = destabilization_certificate(&net).unwrap();
        assert_eq!(cert.quartets().len(), 2);
        assert!(cert.final_angle.to_degrees() < CLOSING_TOLERANCE_DEG);
    }

    #[test]
    fn shortfall_when_budget_only_meets_margin_elsewhere() {
        // Lightly damped plant: graphs come closest near resonance, not at DC.
        let p = StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.05, 1.0]).unwrap();
        let c = StateSpaceModel::scalar_gain(-0.5);
        let b = margin::stability_margin(&p, &c);
        assert!(b > 0.0);
        let r = (b.asin() + 0.01).sin();
        let net = NetworkModel::new(p, c, vec![Channel::new("a", r)]).unwrap();
        match destabilization_certificate(&net) {
            Err(CertificateError::AngleShortfall(cert)) => assert!(cert.near_violation),
            Ok(cert) => assert!(cert.final_angle.to_degrees() < CLOSING_TOLERANCE_DEG),
            Err(e) => panic!("{e}"),
        }
    }
}

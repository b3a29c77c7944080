//! Verdicts: the arcsin robust-stability checks, the stability residue and
//! its journal, and the destabilization certificate.

mod certificate;
mod ledger;

use std::collections::HashSet;

use rand::Rng;
use thiserror::Error;

pub use certificate::{destabilization_certificate, Certificate, CertificateError, CertificateStep};
pub use ledger::{LedgerError, LedgerEvent, LedgerLock, ResidueLedger, SharedLedger};

use crate::cone;
use crate::lti::StateSpaceModel;
use crate::margin;
use crate::twoport::{TwoPortChain, TwoPortError, UncertaintyQuartet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("value {0} outside the admissible range")]
    OutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("duplicate channel label {0:?}")]
    DuplicateLabel(String),
    #[error("channel {0:?} has no concrete quartet")]
    MissingQuartet(String),
    #[error(transparent)]
    TwoPort(#[from] TwoPortError),
}

/// One communication channel: label, uncertainty bound and, optionally, the
/// concrete quartet realizing it.
#[derive(Debug, Clone)]
pub struct Channel {
    pub label: String,
    pub r: f64,
    pub quartet: Option<UncertaintyQuartet>,
}

impl Channel {
    pub fn new(label: impl Into<String>, r: f64) -> Self {
        Self { label: label.into(), r, quartet: None }
    }

    pub fn with_quartet(label: impl Into<String>, quartet: UncertaintyQuartet) -> Self {
        Self { label: label.into(), r: quartet.declared_bound(), quartet: Some(quartet) }
    }
}

/// Plant, controller and the channel cascade between them (plant side first).
#[derive(Debug, Clone)]
pub struct NetworkModel {
    plant: StateSpaceModel,
    controller: StateSpaceModel,
    channels: Vec<Channel>,
}

impl NetworkModel {
    pub fn new(
        plant: StateSpaceModel,
        controller: StateSpaceModel,
        channels: Vec<Channel>,
    ) -> Result<Self, AnalysisError> {
        let (m, p) = (plant.inputs(), plant.outputs());
        if controller.inputs() != p || controller.outputs() != m {
            return Err(AnalysisError::Dimension(format!(
                "plant is {p}x{m} but controller is {}x{}",
                controller.outputs(),
                controller.inputs()
            )));
        }
        let mut seen = HashSet::new();
        for ch in &channels {
            if !(0.0..1.0).contains(&ch.r) {
                return Err(AnalysisError::OutOfRange(ch.r));
            }
            if !seen.insert(ch.label.as_str()) {
                return Err(AnalysisError::DuplicateLabel(ch.label.clone()));
            }
            if let Some(q) = &ch.quartet {
                if q.partition() != (m, p) {
                    return Err(AnalysisError::Dimension(format!(
                        "channel {:?} acts on {:?}, loop needs ({m}, {p})",
                        ch.label,
                        q.partition()
                    )));
                }
                if q.declared_bound() > ch.r + 1e-12 {
                    return Err(AnalysisError::OutOfRange(q.declared_bound()));
                }
            }
        }
        Ok(Self { plant, controller, channels })
    }

    pub fn plant(&self) -> &StateSpaceModel {
        &self.plant
    }

    pub fn controller(&self) -> &StateSpaceModel {
        &self.controller
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// `(m, p)`: plant inputs and outputs.
    pub fn partition(&self) -> (usize, usize) {
        (self.plant.inputs(), self.plant.outputs())
    }

    pub fn radii(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.r).collect()
    }

    /// True when some concrete quartet has no analytic bound.
    pub fn is_advisory(&self) -> bool {
        self.channels.iter().any(|c| c.quartet.as_ref().is_some_and(|q| q.is_unverified()))
    }

    /// Chain built from the concrete quartets.
    pub fn concrete_chain(&self) -> Result<TwoPortChain, AnalysisError> {
        let quartets = self
            .channels
            .iter()
            .map(|c| c.quartet.clone().ok_or_else(|| AnalysisError::MissingQuartet(c.label.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let (m, p) = self.partition();
        Ok(TwoPortChain::from_quartets(quartets, m, p)?)
    }

    /// Chain with random catalog quartets standing in for missing ones.
    pub fn draw_chain<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TwoPortChain, AnalysisError> {
        let (m, p) = self.partition();
        let quartets = self
            .channels
            .iter()
            .map(|c| match &c.quartet {
                Some(q) => Ok(q.clone()),
                None => UncertaintyQuartet::random(c.r, m, p, rng),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TwoPortChain::from_quartets(quartets, m, p)?)
    }

    /// Same loop with the channels replaced.
    pub fn with_channels(&self, channels: Vec<Channel>) -> Result<Self, AnalysisError> {
        Self::new(self.plant.clone(), self.controller.clone(), channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    RobustlyStable,
    NotGuaranteed,
    LoopUnstable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::RobustlyStable => "robustly-stable",
            Verdict::NotGuaranteed => "not-guaranteed",
            Verdict::LoopUnstable => "loop-unstable",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of the two-cone check for one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCheck {
    pub slack: f64,
    pub verdict: Verdict,
}

fn verdict_for(b: f64, slack: f64) -> Verdict {
    if b <= 0.0 {
        Verdict::LoopUnstable
    } else if slack > 0.0 {
        Verdict::RobustlyStable
    } else {
        Verdict::NotGuaranteed
    }
}

/// `arcsin r_p + arcsin r_c < arcsin b` for plant and controller cones of
/// radii `r_p`, `r_c`. Radii of 0 and 1 are admitted so that empty or
/// saturated cascades can be checked too.
pub fn closed_loop_robust_check(b: f64, r_p: f64, r_c: f64) -> Result<LoopCheck, AnalysisError> {
    for v in [b, r_p, r_c] {
        if !(0.0..=1.0).contains(&v) {
            return Err(AnalysisError::OutOfRange(v));
        }
    }
    let slack = b.asin() - r_p.asin() - r_c.asin();
    Ok(LoopCheck { slack, verdict: verdict_for(b, slack) })
}

/// Compensated sum.
pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `arcsin b − Σ arcsin r_k`.
pub fn residue(b: f64, radii: &[f64]) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&b) {
        return Err(AnalysisError::OutOfRange(b));
    }
    for &r in radii {
        if !(0.0..1.0).contains(&r) {
            return Err(AnalysisError::OutOfRange(r));
        }
    }
    Ok(residue_from_angle(b.asin(), radii.iter().map(|r| r.asin())))
}

pub(crate) fn residue_from_angle(arcsin_b: f64, angles: impl IntoIterator<Item = f64>) -> f64 {
    arcsin_b - neumaier_sum(angles)
}

/// Per-channel contribution to the residue.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelContribution {
    pub label: String,
    pub r: f64,
    pub arcsin_r: f64,
}

/// Two-cone check at split point `k`: the first `k` channels folded into
/// the plant cone, the rest into the controller cone.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCheck {
    pub k: usize,
    pub r_p: f64,
    pub r_c: f64,
    pub slack: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub b: f64,
    pub arcsin_b: f64,
    pub internally_stable: bool,
    pub channels: Vec<ChannelContribution>,
    pub residue: f64,
    pub verdict: Verdict,
    pub splits: Vec<SplitCheck>,
    pub advisory: Vec<String>,
    pub diagnostics: Vec<String>,
}

/// Margin, residue and verdict for the whole network, plus the two-cone
/// check at every split point.
pub fn ncs_robust_check(network: &NetworkModel) -> StabilityReport {
    let internally_stable = margin::internal_stability(network.plant(), network.controller());
    let mut diagnostics = Vec::new();
    let b = if internally_stable { margin::stability_margin(network.plant(), network.controller()) } else { 0.0 };
    if !internally_stable {
        diagnostics.push("nominal loop is not internally stable or not well-posed".to_string());
    } else if b == 0.0 {
        diagnostics.push("H-infinity norm of the projection could not be evaluated".to_string());
    }
    let radii = network.radii();
    let channels = network
        .channels()
        .iter()
        .map(|c| ChannelContribution { label: c.label.clone(), r: c.r, arcsin_r: c.r.asin() })
        .collect::<Vec<_>>();
    let arcsin_b = b.asin();
    let residue = residue_from_angle(arcsin_b, channels.iter().map(|c| c.arcsin_r));
    let splits = (0..=radii.len())
        .map(|k| {
            let r_p = cone::cascade_radius(&radii[..k]).expect("radii validated by the network");
            let r_c = cone::cascade_radius(&radii[k..]).expect("radii validated by the network");
            let check = closed_loop_robust_check(b, r_p, r_c).expect("radii in [0, 1]");
            SplitCheck { k, r_p, r_c, slack: check.slack, verdict: check.verdict }
        })
        .collect();
    let mut advisory = Vec::new();
    for c in network.channels() {
        if c.quartet.as_ref().is_some_and(|q| q.is_unverified()) {
            advisory.push(format!("channel {:?} uses a user-defined quartet whose bound is not verified", c.label));
        }
    }
    StabilityReport {
        b,
        arcsin_b,
        internally_stable,
        channels,
        residue,
        verdict: verdict_for(b, residue),
        splits,
        advisory,
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    fn integrator_network(radii: &[f64]) -> NetworkModel {
        let p = StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap();
        let c = StateSpaceModel::scalar_gain(-1.0);
        let chans = radii.iter().enumerate().map(|(i, &r)| Channel::new(format!("ch{i}"), r)).collect();
        NetworkModel::new(p, c, chans).unwrap()
    }

    #[test]
    fn loop_check_examples() {
        let c = closed_loop_robust_check(1.0, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(c.slack, deg(30.0), epsilon = 1e-12);
        assert_eq!(c.verdict, Verdict::RobustlyStable);

        let s15 = deg(15.0).sin();
        let c = closed_loop_robust_check(FRAC_1_SQRT_2, s15, s15).unwrap();
        assert_abs_diff_eq!(c.slack, deg(15.0), epsilon = 1e-12);
        assert_eq!(c.verdict, Verdict::RobustlyStable);

        let c = closed_loop_robust_check(FRAC_1_SQRT_2, 0.5, deg(20.0).sin()).unwrap();
        assert_abs_diff_eq!(c.slack, deg(-5.0), epsilon = 1e-12);
        assert_eq!(c.verdict, Verdict::NotGuaranteed);

        assert!(closed_loop_robust_check(1.2, 0.1, 0.1).is_err());
    }

    #[test]
    fn residue_examples() {
        assert_eq!(residue(0.6, &[]).unwrap(), 0.6f64.asin());
        let r = residue(1.0, &[deg(30.0).sin(), deg(60.0).sin()]).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(verdict_for(1.0, r), Verdict::NotGuaranteed);
        let base = residue(0.9, &[0.1, 0.2]).unwrap();
        assert!(residue(0.9, &[0.1, 0.21]).unwrap() < base);
        assert!(residue(0.9, &[1.0]).is_err());
    }

    #[test]
    fn integrator_network_verdicts() {
        let rep = ncs_robust_check(&integrator_network(&[]));
        assert_eq!(rep.verdict, Verdict::RobustlyStable);
        assert_abs_diff_eq!(rep.residue, deg(45.0), epsilon = 1e-4);

        // oracle: 45° − 2·asin(0.2)
        let rep = ncs_robust_check(&integrator_network(&[0.2, 0.2]));
        let oracle = FRAC_PI_2 / 2.0 - 2.0 * 0.2f64.asin();
        assert_abs_diff_eq!(rep.residue, oracle, epsilon = 1e-4);
        assert_abs_diff_eq!(rep.residue.to_degrees(), 21.93, epsilon = 0.01);
        assert_eq!(rep.verdict, Verdict::RobustlyStable);
        assert_eq!(rep.splits.len(), 3);
        assert!(rep.splits.iter().all(|s| s.verdict == rep.verdict));

        let rep = ncs_robust_check(&integrator_network(&[0.5, 0.3]));
        assert_abs_diff_eq!(rep.residue.to_degrees(), -2.46, epsilon = 0.01);
        assert_eq!(rep.verdict, Verdict::NotGuaranteed);
        assert!(rep.splits.iter().all(|s| s.verdict == rep.verdict));
    }

    #[test]
    fn unstable_loop_is_reported() {
        let p = StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap();
        let net = NetworkModel::new(p, StateSpaceModel::scalar_gain(0.0), vec![]).unwrap();
        let rep = ncs_robust_check(&net);
        assert_eq!(rep.verdict, Verdict::LoopUnstable);
        assert_eq!(rep.b, 0.0);
        assert!(!rep.diagnostics.is_empty());
    }

    #[test]
    fn verdict_is_order_free() {
        let a = ncs_robust_check(&integrator_network(&[0.1, 0.4, 0.2]));
        let b = ncs_robust_check(&integrator_network(&[0.4, 0.2, 0.1]));
        assert_eq!(a.verdict, b.verdict);
        assert_abs_diff_eq!(a.residue, b.residue, epsilon = 1e-15);
    }

    #[test]
    fn network_validation() {
        let p = StateSpaceModel::scalar_gain(2.0);
        let c = StateSpaceModel::scalar_gain(0.0);
        let dup = vec![Channel::new("a", 0.1), Channel::new("a", 0.2)];
        assert!(matches!(NetworkModel::new(p.clone(), c.clone(), dup), Err(AnalysisError::DuplicateLabel(_))));
        assert!(matches!(
            NetworkModel::new(p.clone(), c.clone(), vec![Channel::new("a", 1.0)]),
            Err(AnalysisError::OutOfRange(_))
        ));
        let net = NetworkModel::new(p, c, vec![Channel::new("a", 0.1)]).unwrap();
        assert!(matches!(net.concrete_chain(), Err(AnalysisError::MissingQuartet(_))));
    }
}

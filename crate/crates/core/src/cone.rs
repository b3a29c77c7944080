//! Conelike neighborhoods `S(M, r)` of graphs and the angle machinery used
//! by the robustness checks.
//!
//! For a linear center the distance of `n` is `sin θ(n, M) = ‖(I − Q)n‖/‖n‖`
//! where `Q` projects onto `M`. The minimizer `m̄ = Qn·‖n‖²/‖Qn‖²` of
//! `‖n − m‖/‖m‖` gives the same number, so both normalizations agree.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::graphsym::{self, CoprimeFactorization, GraphKind, GraphSample};
use crate::linalg;
use crate::lti::FrequencyGrid;
use crate::margin;
use crate::signal::{SignalError, SignalTrace};

/// Membership tolerance on the sine scale.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConeError {
    #[error("signal is zero")]
    ZeroSignal,
    #[error("radius {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("signal shape does not match the center")]
    NotConformable,
}

impl From<SignalError> for ConeError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::ZeroSignal => ConeError::ZeroSignal,
            _ => ConeError::NotConformable,
        }
    }
}

/// Finite-horizon linear subspace given by an orthonormal basis of
/// flattened traces (`channels × horizon`, column-major).
#[derive(Debug, Clone)]
pub struct LinearCenter {
    basis: DMatrix<f64>,
    channels: usize,
    horizon: usize,
}

impl LinearCenter {
    /// Span of the given vectors in `R^{channels·horizon}`.
    pub fn from_vectors(vectors: &DMatrix<f64>, channels: usize, horizon: usize) -> Self {
        assert_eq!(vectors.nrows(), channels * horizon, "vector length must be channels·horizon");
        Self { basis: linalg::orth(vectors, 1e-12), channels, horizon }
    }

    /// Span of sampled graph points.
    pub fn from_points(points: &[SignalTrace]) -> Self {
        let first = &points[0];
        let (ch, h) = (first.channels(), first.horizon());
        let cols = DMatrix::from_fn(ch * h, points.len(), |i, j| points[j].samples().as_slice()[i]);
        Self::from_vectors(&cols, ch, h)
    }

    /// Exact finite-horizon graph of an LTI symbol: the span of its
    /// responses to unit impulses at every step and input channel.
    pub fn from_symbol(fact: &CoprimeFactorization, horizon: usize, dt: f64) -> Self {
        let sym = fact.symbol();
        let k = fact.excitation_channels();
        let ch = fact.graph_channels();
        let mut cols = DMatrix::zeros(ch * horizon, k * horizon);
        for input in 0..k {
            let x = SignalTrace::from_fn(dt, k, horizon, |c, t| if c == input && t == 0 { 1.0 } else { 0.0 });
            let imp = sym.simulate(&x).expect("impulse matches symbol inputs");
            // shifted copies realize the Toeplitz structure
            for shift in 0..horizon {
                let col = input * horizon + shift;
                for t in 0..(horizon - shift) {
                    for c in 0..ch {
                        cols[((t + shift) * ch + c, col)] = imp.at(c, t);
                    }
                }
            }
        }
        Self::from_vectors(&cols, ch, horizon)
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn flatten(&self, n: &SignalTrace) -> Result<DVector<f64>, ConeError> {
        if n.channels() != self.channels || n.horizon() != self.horizon {
            return Err(ConeError::NotConformable);
        }
        Ok(DVector::from_column_slice(n.samples().as_slice()))
    }

    /// Orthogonal projection `Q n`.
    pub fn project(&self, n: &SignalTrace) -> Result<SignalTrace, ConeError> {
        let v = self.flatten(n)?;
        let q = &self.basis * (self.basis.transpose() * v);
        Ok(SignalTrace::new(n.dt(), DMatrix::from_column_slice(self.channels, self.horizon, q.as_slice()))?)
    }

    /// `‖(I − Q)n‖ / ‖n‖`.
    pub fn distance(&self, n: &SignalTrace) -> Result<f64, ConeError> {
        if n.is_zero() {
            return Err(ConeError::ZeroSignal);
        }
        let v = self.flatten(n)?;
        let coeff = self.basis.transpose() * &v;
        let resid = &v - &self.basis * coeff;
        Ok((resid.norm() / v.norm()).min(1.0))
    }

    /// The point `m̄` minimizing `‖n − m‖/‖m‖`, or `None` when `n ⊥ M`.
    pub fn closest_by_m_norm(&self, n: &SignalTrace) -> Result<Option<SignalTrace>, ConeError> {
        let q = self.project(n)?;
        let qq = q.energy();
        if qq <= f64::MIN_POSITIVE {
            return Ok(None);
        }
        Ok(Some(q.scale(n.energy() / qq)))
    }

    /// `min_m ‖n − m‖/‖m‖` evaluated at `m̄` (1 when `n ⊥ M`).
    pub fn distance_by_m_norm(&self, n: &SignalTrace) -> Result<f64, ConeError> {
        if n.is_zero() {
            return Err(ConeError::ZeroSignal);
        }
        match self.closest_by_m_norm(n)? {
            Some(m) => Ok(n.sub(&m)?.l2_norm() / m.l2_norm()),
            None => Ok(1.0),
        }
    }
}

/// Center of a conelike set.
#[derive(Debug, Clone)]
pub enum ConeCenter {
    Linear(LinearCenter),
    /// Sampled points of a possibly nonlinear graph; distances are upper
    /// bound estimates of the true infimum.
    Points(Vec<SignalTrace>),
}

impl ConeCenter {
    pub fn is_upper_bound_estimate(&self) -> bool {
        matches!(self, ConeCenter::Points(_))
    }
}

impl From<LinearCenter> for ConeCenter {
    fn from(c: LinearCenter) -> Self {
        ConeCenter::Linear(c)
    }
}

/// `S(M, r)`.
#[derive(Debug, Clone)]
pub struct ConelikeSet {
    pub center: ConeCenter,
    radius: f64,
}

impl ConelikeSet {
    pub fn new(center: ConeCenter, radius: f64) -> Result<Self, ConeError> {
        check_radius(radius)?;
        Ok(Self { center, radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, n: &SignalTrace) -> Result<bool, ConeError> {
        in_cone(n, &self.center, self.radius)
    }
}

fn check_radius(r: f64) -> Result<(), ConeError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(ConeError::OutOfRange(r))
    }
}

/// Sine of the smallest angle between `n` and the center.
pub fn cone_distance(n: &SignalTrace, center: &ConeCenter) -> Result<f64, ConeError> {
    if n.is_zero() {
        return Err(ConeError::ZeroSignal);
    }
    match center {
        ConeCenter::Linear(lin) => lin.distance(n),
        ConeCenter::Points(points) => {
            let mut best: f64 = 1.0;
            for m in points {
                if m.is_zero() {
                    continue;
                }
                best = best.min(n.angle(m)?.sin());
            }
            Ok(best)
        }
    }
}

pub fn in_cone(n: &SignalTrace, center: &ConeCenter, r: f64) -> Result<bool, ConeError> {
    check_radius(r)?;
    Ok(cone_distance(n, center)? <= r + MEMBERSHIP_TOL)
}

/// `sin(Σ arcsin rᵢ)`, clamped to 1 once the angle sum reaches π/2; 0 for
/// an empty cascade.
pub fn cascade_radius(radii: &[f64]) -> Result<f64, ConeError> {
    let mut total = 0.0;
    for &r in radii {
        check_radius(r)?;
        total += r.asin();
    }
    if total >= std::f64::consts::FRAC_PI_2 {
        Ok(1.0)
    } else {
        Ok(total.sin())
    }
}

/// Smallest acute angle between points of two samples.
///
/// When both samples carry LTI symbols, the pairwise minimum is refined by
/// a pair of windowed sinusoids aligned with the principal vectors at the
/// frequency where the graphs come closest.
pub fn min_graph_angle(a: &GraphSample, b: &GraphSample) -> f64 {
    let pairwise = a
        .points
        .par_iter()
        .map(|m| b.points.iter().filter_map(|n| m.angle(n).ok()).fold(std::f64::consts::FRAC_PI_2, f64::min))
        .reduce(|| std::f64::consts::FRAC_PI_2, f64::min);
    let refined = match (&a.symbol, &b.symbol, a.points.first()) {
        (Some(fa), Some(fb), Some(p)) => refined_graph_angle(fa, fb, p.dt(), p.horizon()),
        _ => None,
    };
    refined.map_or(pairwise, |r| r.min(pairwise))
}

/// Frequency-guided witness pair `(m, n)` and its time-domain angle.
#[derive(Debug, Clone)]
pub struct AngleWitness {
    pub omega: f64,
    pub m: SignalTrace,
    pub n: SignalTrace,
    pub angle: f64,
}

/// Builds the witness pair for two symbols at the grid frequency of
/// smallest graph angle (discrete-time responses at step `dt`).
pub fn angle_witness(
    fa: &CoprimeFactorization,
    fb: &CoprimeFactorization,
    dt: f64,
    min_horizon: usize,
) -> Option<AngleWitness> {
    let nyquist = std::f64::consts::PI / dt;
    let grid = FrequencyGrid::log_spaced(1e-4, 1e4f64.min(0.5 * nyquist), 200).ok()?;
    let best = std::iter::once(0.0)
        .chain(grid.omegas().iter().copied())
        .filter_map(|w| {
            let ga = fa.discrete_response(w, dt).ok()?;
            let gb = fb.discrete_response(w, dt).ok()?;
            let angle = margin::graph_angle_from_responses(w, &ga, &gb)?;
            Some((angle, ga, gb))
        })
        .min_by(|x, y| x.0.theta.total_cmp(&y.0.theta))?;
    let (angle, ga, gb) = best;
    let (g, h) = if angle.omega == 0.0 { realify(&angle.g, &angle.h) } else { (angle.g, angle.h) };
    let xa = excitation_for(&ga, &g)?;
    let xb = excitation_for(&gb, &h)?;
    let horizon = sinusoid_horizon(angle.omega, dt, min_horizon);
    let m = graphsym::windowed_point(fa, &xa, angle.omega, dt, horizon);
    let n = graphsym::windowed_point(fb, &xb, angle.omega, dt, horizon);
    let theta = m.angle(&n).ok()?;
    Some(AngleWitness { omega: angle.omega, m, n, angle: theta })
}

fn refined_graph_angle(fa: &CoprimeFactorization, fb: &CoprimeFactorization, dt: f64, horizon: usize) -> Option<f64> {
    if fa.kind == fb.kind && fa.kind == GraphKind::ControllerInverse {
        return None;
    }
    angle_witness(fa, fb, dt, horizon).map(|w| w.angle)
}

/// Steps needed for a Hann window spanning at least 20 periods.
pub fn sinusoid_horizon(omega: f64, dt: f64, min_horizon: usize) -> usize {
    const MAX_STEPS: usize = 200_000;
    if omega <= 0.0 {
        return min_horizon.max(2);
    }
    let periods = 20.0 * 2.0 * std::f64::consts::PI / omega;
    let steps = (periods / dt / 0.8).ceil() as usize;
    steps.clamp(min_horizon.max(2), MAX_STEPS.max(min_horizon))
}

/// Symbol input `a` with `G a = target` (least squares).
pub fn excitation_for(g: &linalg::CMatrix, target: &DVector<Complex64>) -> Option<DVector<Complex64>> {
    let svd = g.clone().svd(true, true);
    svd.solve(target, 1e-12).ok()
}

/// Rotates a principal pair by a common phase so that `g` is as real as
/// possible; exact for responses at ω = 0.
pub fn realify(g: &DVector<Complex64>, h: &DVector<Complex64>) -> (DVector<Complex64>, DVector<Complex64>) {
    let (i, _) = g.iter().enumerate().fold((0, 0.0), |acc, (i, v)| if v.norm() > acc.1 { (i, v.norm()) } else { acc });
    let gi = g[i];
    if gi.norm() == 0.0 {
        return (g.clone(), h.clone());
    }
    let phase = gi.conj() / gi.norm();
    (g * phase, h * phase)
}

//! Graph symbols from normalized right coprime factorizations, and sampled
//! points of plant graphs and controller inverse graphs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{self, CMatrix, LinalgError};
use crate::lti::{FrequencyGrid, LtiError, StateSpaceModel, STABILITY_EPS};
use crate::signal::SignalTrace;

/// Rank tolerance for the PBH tests.
pub const PBH_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("system is not stabilizable (uncontrollable mode at {0})")]
    NotStabilizable(Complex64),
    #[error("system is not detectable (unobservable mode at {0})")]
    NotDetectable(Complex64),
    #[error("Riccati equation failed: {0}")]
    RiccatiFailure(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

impl From<LinalgError> for GraphError {
    fn from(e: LinalgError) -> Self {
        GraphError::RiccatiFailure(e.to_string())
    }
}

/// Which graph a symbol parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// `G_P = [M; N] H₂` with `P = N M⁻¹`.
    Plant,
    /// `G′_C = [V; U] H₂` with `C = V U⁻¹`; points are `[C y; y]`.
    ControllerInverse,
}

/// Normalized right coprime factors `sys = N M⁻¹`.
///
/// For a controller, `M` plays the role of `U` and `N` of `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoprimeFactorization {
    pub m: StateSpaceModel,
    pub n: StateSpaceModel,
    pub kind: GraphKind,
    pub bezout: Option<(StateSpaceModel, StateSpaceModel)>,
}

impl CoprimeFactorization {
    /// Dimension of the stacked graph signal `[u; y]`.
    pub fn graph_channels(&self) -> usize {
        self.m.outputs() + self.n.outputs()
    }

    /// Number of excitation channels of the symbol.
    pub fn excitation_channels(&self) -> usize {
        self.m.inputs()
    }

    /// Stacked symbol: `[M; N]` for plants, `[V; U]` for controllers.
    pub fn symbol(&self) -> StateSpaceModel {
        let (top, bottom) = match self.kind {
            GraphKind::Plant => (&self.m, &self.n),
            GraphKind::ControllerInverse => (&self.n, &self.m),
        };
        // M and N share (A, B) by construction
        let c = stack_rows(top.c(), bottom.c());
        let d = stack_rows(top.d(), bottom.d());
        StateSpaceModel::new(top.a().clone(), top.b().clone(), c, d).expect("factors share their state realization")
    }

    /// Symbol frequency response (orthonormal columns for normalized factors).
    pub fn response(&self, omega: f64) -> Result<CMatrix, LtiError> {
        self.symbol().freq_response(omega)
    }

    /// Response of the Tustin-discretized symbol at discrete frequency `omega`.
    pub fn discrete_response(&self, omega: f64, dt: f64) -> Result<CMatrix, LtiError> {
        self.response(warp(omega, dt))
    }

    /// Worst normalization residual `‖M*M + N*N − I‖` and relative ratio
    /// residual `sup‖sys − N M⁻¹‖ / sup‖sys‖` over the grid.
    pub fn check(&self, sys: &StateSpaceModel, grid: &FrequencyGrid) -> Result<(f64, f64), LtiError> {
        let k = self.excitation_channels();
        let eye = CMatrix::identity(k, k);
        let mut norm_res: f64 = 0.0;
        let mut diff_max: f64 = 0.0;
        let mut sys_max: f64 = 0.0;
        for &w in grid.omegas() {
            let m = self.m.freq_response(w)?;
            let n = self.n.freq_response(w)?;
            let gram = m.adjoint() * &m + n.adjoint() * &n;
            norm_res = norm_res.max(linalg::sigma_max_c(&(gram - &eye)));
            let Ok(g) = sys.freq_response(w) else { continue };
            let Some(minv) = m.try_inverse() else { continue };
            diff_max = diff_max.max(linalg::sigma_max_c(&(&g - n * minv)));
            sys_max = sys_max.max(linalg::sigma_max_c(&g));
        }
        Ok((norm_res, diff_max / sys_max.max(1.0)))
    }
}

/// Maps a discrete-time frequency to the continuous frequency that the
/// bilinear transform associates with it.
pub fn warp(omega: f64, dt: f64) -> f64 {
    2.0 / dt * (omega * dt / 2.0).tan()
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

fn symmetric_inv_sqrt(r: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = r.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn pbh(a: &DMatrix<f64>, other: &DMatrix<f64>, by_columns: bool) -> Option<Complex64> {
    let n = a.nrows();
    let scale = 1.0 + linalg::sigma_max(a) + linalg::sigma_max(other);
    let ac = linalg::to_complex(a);
    let oc = linalg::to_complex(other);
    for lam in a.clone().complex_eigenvalues().iter() {
        if lam.re < -STABILITY_EPS {
            continue;
        }
        let shifted = &ac - CMatrix::identity(n, n) * *lam;
        let test = if by_columns {
            let mut t = CMatrix::zeros(n, n + oc.ncols());
            t.view_mut((0, 0), (n, n)).copy_from(&shifted);
            t.view_mut((0, n), (n, oc.ncols())).copy_from(&oc);
            t
        } else {
            let mut t = CMatrix::zeros(n + oc.nrows(), n);
            t.view_mut((0, 0), (n, n)).copy_from(&shifted);
            t.view_mut((n, 0), (oc.nrows(), n)).copy_from(&oc);
            t
        };
        let sv = test.singular_values();
        if sv.min() <= PBH_TOL * scale {
            return Some(*lam);
        }
    }
    None
}

/// Normalized right coprime factorization from the stabilizing solution of
/// the generalized control Riccati equation.
pub fn normalized_rcf(sys: &StateSpaceModel) -> Result<CoprimeFactorization, GraphError> {
    factorize(sys, GraphKind::Plant)
}

/// Inverse-graph symbol of a controller: `C = V U⁻¹`, points `[V; U] x`.
pub fn inverse_graph_symbol(controller: &StateSpaceModel) -> Result<CoprimeFactorization, GraphError> {
    factorize(controller, GraphKind::ControllerInverse)
}

fn factorize(sys: &StateSpaceModel, kind: GraphKind) -> Result<CoprimeFactorization, GraphError> {
    let (a, b, c, d) = (sys.a(), sys.b(), sys.c(), sys.d());
    let (m, p) = (sys.inputs(), sys.outputs());
    if sys.states() > 0 {
        if let Some(l) = pbh(a, b, true) {
            return Err(GraphError::NotStabilizable(l));
        }
        if let Some(l) = pbh(a, c, false) {
            return Err(GraphError::NotDetectable(l));
        }
    }
    let r = DMatrix::identity(m, m) + d.transpose() * d;
    let rt = DMatrix::identity(p, p) + d * d.transpose();
    let r_inv = r.clone().try_inverse().expect("I + DᵀD is positive definite");
    let rt_inv = rt.try_inverse().expect("I + DDᵀ is positive definite");
    let abar = a - b * &r_inv * d.transpose() * c;
    let s = b * &r_inv * b.transpose();
    let q = c.transpose() * rt_inv * c;
    let x = linalg::solve_care(&abar, &s, &q)?;
    let f = -(&r_inv * (b.transpose() * &x + d.transpose() * c));
    let r_half = symmetric_inv_sqrt(&r);
    let af = a + b * &f;
    let bf = b * &r_half;
    let mf = StateSpaceModel::new(af.clone(), bf.clone(), f.clone(), r_half.clone())?;
    let nf = StateSpaceModel::new(af, bf, c + d * &f, d * &r_half)?;
    if !mf.is_hurwitz() {
        return Err(GraphError::RiccatiFailure("closed-loop factor is not stable".into()));
    }
    Ok(CoprimeFactorization { m: mf, n: nf, kind, bezout: None })
}

/// Finite sample of a graph: each point is a stacked `[u; y]` trace.
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub points: Vec<SignalTrace>,
    pub kind: GraphKind,
    /// Set when every point lies in the graph of this LTI symbol.
    pub symbol: Option<CoprimeFactorization>,
}

impl GraphSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Second-order Butterworth low-pass with cutoff `1/(4 dt)` Hz.
fn excitation_filter(dt: f64) -> StateSpaceModel {
    let wc = std::f64::consts::PI / (2.0 * dt);
    StateSpaceModel::from_transfer_function(&[wc * wc], &[1.0, std::f64::consts::SQRT_2 * wc, wc * wc])
        .expect("Butterworth section is proper")
}

/// Band-limited Gaussian noise, tapered to zero by 60 % of the horizon so
/// that stable responses settle inside the trace.
pub fn band_limited_noise(channels: usize, horizon: usize, dt: f64, rng: &mut ChaCha8Rng) -> SignalTrace {
    let filter = excitation_filter(dt);
    let mut samples = DMatrix::zeros(channels, horizon);
    let (ramp0, ramp1) = ((0.4 * horizon as f64), (0.6 * horizon as f64));
    loop {
        for ch in 0..channels {
            let white = SignalTrace::from_fn(dt, 1, horizon, |_, _| StandardNormal.sample(&mut *rng));
            let shaped = filter.simulate(&white).expect("filter input is conformable");
            for k in 0..horizon {
                let t = k as f64;
                let taper = if t < ramp0 {
                    1.0
                } else if t < ramp1 {
                    0.5 * (1.0 + (std::f64::consts::PI * (t - ramp0) / (ramp1 - ramp0)).cos())
                } else {
                    0.0
                };
                samples[(ch, k)] = shaped.at(0, k) * taper;
            }
        }
        let trace = SignalTrace::new(dt, samples.clone()).expect("finite samples");
        if !trace.is_zero() {
            return trace;
        }
    }
}

/// Draws `count` band-limited excitations `x` and returns the graph points
/// `[M x; N x]` (or `[V x; U x]`).
pub fn sample_graph(fact: &CoprimeFactorization, count: usize, horizon: usize, dt: f64, seed: u64) -> GraphSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbol = fact.symbol();
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let x = band_limited_noise(fact.excitation_channels(), horizon, dt, &mut rng);
        let point = symbol.simulate(&x).expect("symbol is conformable with its excitation");
        if !point.is_zero() {
            points.push(point);
        }
    }
    GraphSample { points, kind: fact.kind, symbol: Some(fact.clone()) }
}

/// Graph point excited by a Hann-windowed sinusoid `w(t) Re(a e^{jωt})`;
/// the window spans 80 % of the horizon.
pub fn windowed_point(
    fact: &CoprimeFactorization,
    direction: &DVector<Complex64>,
    omega: f64,
    dt: f64,
    horizon: usize,
) -> SignalTrace {
    let x = windowed_sinusoid(direction, omega, dt, horizon);
    fact.symbol().simulate(&x).expect("direction matches the excitation channels")
}

/// `w(t) Re(a e^{jωt})` with a Hann window over the first 80 % of the horizon.
pub fn windowed_sinusoid(direction: &DVector<Complex64>, omega: f64, dt: f64, horizon: usize) -> SignalTrace {
    let span = (0.8 * horizon as f64).max(1.0);
    SignalTrace::from_fn(dt, direction.len(), horizon, |ch, k| {
        let t = k as f64;
        if t >= span {
            return 0.0;
        }
        let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t / span).cos());
        let phase = Complex64::new(0.0, omega * t * dt).exp();
        w * (direction[ch] * phase).re
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn integrator() -> StateSpaceModel {
        StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap()
    }

    fn scalar(f: &StateSpaceModel) -> f64 {
        assert_eq!(f.states(), 0);
        f.d()[(0, 0)]
    }

    #[test]
    fn static_plant_factors() {
        for p in [0.0, 2.0, -0.7] {
            let f = normalized_rcf(&StateSpaceModel::scalar_gain(p)).unwrap();
            let s = (1.0 + p * p).sqrt();
            assert_abs_diff_eq!(scalar(&f.m), 1.0 / s, epsilon = 1e-15);
            assert_abs_diff_eq!(scalar(&f.n), p / s, epsilon = 1e-15);
        }
    }

    #[test]
    fn integrator_factors() {
        let f = normalized_rcf(&integrator()).unwrap();
        for w in [0.01, 1.0, 30.0] {
            let s = Complex64::new(0.0, w);
            let m = f.m.freq_response(w).unwrap()[(0, 0)];
            let n = f.n.freq_response(w).unwrap()[(0, 0)];
            assert!((m - s / (s + 1.0)).norm() < 1e-12);
            assert!((n - 1.0 / (s + 1.0)).norm() < 1e-12);
        }
        let (norm_res, ratio_res) = f.check(&integrator(), &FrequencyGrid::default()).unwrap();
        assert!(norm_res < 1e-8 && ratio_res < 1e-8);
    }

    #[test]
    fn controller_inverse_symbols() {
        let f = inverse_graph_symbol(&StateSpaceModel::scalar_gain(0.0)).unwrap();
        assert_eq!((scalar(&f.n), scalar(&f.m)), (0.0, 1.0));
        let c = 1.5;
        let f = inverse_graph_symbol(&StateSpaceModel::scalar_gain(c)).unwrap();
        let s = (1.0 + c * c).sqrt();
        assert_abs_diff_eq!(scalar(&f.n), c / s, epsilon = 1e-15);
        assert_abs_diff_eq!(scalar(&f.m), 1.0 / s, epsilon = 1e-15);
        let f = inverse_graph_symbol(&StateSpaceModel::scalar_gain(-1.0)).unwrap();
        assert_abs_diff_eq!(scalar(&f.n), -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(scalar(&f.m), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        // stacked as [v; u] = [C y; y]
        let sym = f.symbol();
        assert_abs_diff_eq!(sym.d()[(0, 0)], -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn random_stable_ratio_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = FrequencyGrid::default();
        for _ in 0..5 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)) - DMatrix::identity(3, 3) * 2.5;
            let sys = StateSpaceModel::new(
                a,
                DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(1, 1, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            let f = normalized_rcf(&sys).unwrap();
            let (norm_res, ratio_res) = f.check(&sys, &grid).unwrap();
            assert!(norm_res < 1e-8, "{norm_res}");
            assert!(ratio_res < 1e-6, "{ratio_res}");
        }
    }

    #[test]
    fn pbh_failures() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let sys = StateSpaceModel::new(
            a.clone(),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(normalized_rcf(&sys), Err(GraphError::NotStabilizable(_))));
        let sys = StateSpaceModel::new(
            a,
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(normalized_rcf(&sys), Err(GraphError::NotDetectable(_))));
    }

    #[test]
    fn sampled_points_lie_on_graph() {
        let f = normalized_rcf(&StateSpaceModel::scalar_gain(1.0)).unwrap();
        let s = sample_graph(&f, 4, 200, 0.01, 3);
        for pt in &s.points {
            for k in 0..pt.horizon() {
                assert_abs_diff_eq!(pt.at(0, k), pt.at(1, k), epsilon = 1e-14);
            }
        }
        let f = normalized_rcf(&StateSpaceModel::scalar_gain(0.0)).unwrap();
        let s = sample_graph(&f, 4, 200, 0.01, 3);
        assert!(s.points.iter().all(|p| (0..p.horizon()).all(|k| p.at(1, k) == 0.0)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = normalized_rcf(&integrator()).unwrap();
        let a = sample_graph(&f, 3, 300, 0.01, 42);
        let b = sample_graph(&f, 3, 300, 0.01, 42);
        let c = sample_graph(&f, 3, 300, 0.01, 43);
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x, y);
        }
        assert_ne!(a.points[0], c.points[0]);
    }

    #[test]
    fn graph_consistency_and_isometry() {
        let p = integrator();
        let f = normalized_rcf(&p).unwrap();
        let dt = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let x = band_limited_noise(1, 4000, dt, &mut rng);
            let pt = f.symbol().simulate(&x).unwrap();
            let u = pt.channel_range(0, 1);
            let y = pt.channel_range(1, 1);
            let y_sim = p.simulate(&u).unwrap();
            assert!(y_sim.sub(&y).unwrap().l2_norm() / y.l2_norm() < 1e-3);
            assert!((pt.l2_norm() / x.l2_norm() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn windowed_point_tracks_frequency_response() {
        let f = normalized_rcf(&integrator()).unwrap();
        let (omega, dt) = (2.0, 0.01);
        let periods = 40.0;
        let horizon = (periods * 2.0 * std::f64::consts::PI / omega / dt / 0.8) as usize;
        let a = DVector::from_element(1, Complex64::new(1.0, 0.0));
        let pt = windowed_point(&f, &a, omega, dt, horizon);
        let g = f.discrete_response(omega, dt).unwrap();
        // energy ratio of the two channels follows |M|² : |N|²
        let eu = pt.channel_range(0, 1).energy();
        let ey = pt.channel_range(1, 1).energy();
        let expect = g[(0, 0)].norm_sqr() / g[(1, 0)].norm_sqr();
        assert!((eu / ey / expect - 1.0).abs() < 1e-2);
    }
}

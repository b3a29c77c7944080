//! Feedback interconnection `F = [[I, C], [P, I]]`, its parallel projections
//! and the stability margin `b = 1/‖Π‖∞`.
//!
//! Sign convention: the loop is positive feedback, `d1 = u1 + C y2`,
//! `d2 = P u1 + y2`, so `Π = [I; P](I − CP)⁻¹[I, −C]`. Classical
//! negative-feedback formulas differ by the sign of `C`.

use nalgebra::DMatrix;
use nalgebra::DVector;
use num_complex::Complex64;
use thiserror::Error;

use crate::graphsym::{self, CoprimeFactorization, GraphError};
use crate::linalg::{self, CMatrix};
use crate::lti::{FrequencyGrid, LtiError, StateSpaceModel};

/// Tolerance on the smallest singular value of `I − D_C D_P`.
pub const WELLPOSED_TOL: f64 = 1e-10;
/// Relative tolerance of the minimal-realization cleanup.
pub const MINREAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarginError {
    #[error("plant is {p_out}×{p_in} but controller is {c_out}×{c_in}")]
    Dimension { p_out: usize, p_in: usize, c_out: usize, c_in: usize },
    #[error("feedback loop is not well-posed (I − D_C D_P is singular)")]
    NotWellPosed,
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// The pair `(P, C)` with its well-posedness certificate.
#[derive(Debug, Clone)]
pub struct FeedbackMap {
    pub plant: StateSpaceModel,
    pub controller: StateSpaceModel,
    pub wellposed: bool,
}

impl FeedbackMap {
    pub fn new(plant: &StateSpaceModel, controller: &StateSpaceModel) -> Result<Self, MarginError> {
        if controller.inputs() != plant.outputs() || controller.outputs() != plant.inputs() {
            return Err(MarginError::Dimension {
                p_out: plant.outputs(),
                p_in: plant.inputs(),
                c_out: controller.outputs(),
                c_in: controller.inputs(),
            });
        }
        let m = plant.inputs();
        let e = DMatrix::identity(m, m) - controller.d() * plant.d();
        let wellposed = m == 0 || e.singular_values().min() > WELLPOSED_TOL;
        Ok(Self { plant: plant.clone(), controller: controller.clone(), wellposed })
    }
}

/// Realizations of `Π_{G_P∥G′_C}` and `Π_{G′_C∥G_P}` on the disturbance
/// pair `[d1; d2]`, with states `[x_P; x_C]`.
#[derive(Debug, Clone)]
pub struct ParallelProjection {
    pub pi: StateSpaceModel,
    pub dual: StateSpaceModel,
}

/// Closed-loop realization of `F⁻¹` and the projections built from it.
pub fn parallel_projection(
    plant: &StateSpaceModel,
    controller: &StateSpaceModel,
) -> Result<ParallelProjection, MarginError> {
    let map = FeedbackMap::new(plant, controller)?;
    if !map.wellposed {
        return Err(MarginError::NotWellPosed);
    }
    let (p, c) = (plant, controller);
    let (m, q) = (p.inputs(), p.outputs());
    let (np, nc) = (p.states(), c.states());
    let n = np + nc;
    let e = (DMatrix::identity(m, m) - c.d() * p.d()).try_inverse().ok_or(MarginError::NotWellPosed)?;

    // u1 = Ku x + Kd d
    let mut ku = DMatrix::zeros(m, n);
    ku.view_mut((0, 0), (m, np)).copy_from(&(&e * c.d() * p.c()));
    ku.view_mut((0, np), (m, nc)).copy_from(&(-(&e * c.c())));
    let mut kd = DMatrix::zeros(m, m + q);
    kd.view_mut((0, 0), (m, m)).copy_from(&e);
    kd.view_mut((0, m), (m, q)).copy_from(&(-(&e * c.d())));

    // y2 = Ly x + Ld d
    let mut cp_ext = DMatrix::zeros(q, n);
    cp_ext.view_mut((0, 0), (q, np)).copy_from(p.c());
    let ly = -&cp_ext - p.d() * &ku;
    let mut ld = -(p.d() * &kd);
    for i in 0..q {
        ld[(i, m + i)] += 1.0;
    }

    let mut bp_ext = DMatrix::zeros(n, m);
    bp_ext.view_mut((0, 0), (np, m)).copy_from(p.b());
    let mut bc_ext = DMatrix::zeros(n, q);
    bc_ext.view_mut((np, 0), (nc, q)).copy_from(c.b());
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (np, np)).copy_from(p.a());
    a.view_mut((np, np), (nc, nc)).copy_from(c.a());
    let a = a + &bp_ext * &ku + &bc_ext * &ly;
    let b = &bp_ext * &kd + &bc_ext * &ld;

    // Π d = [u1; y1], y1 = C_P x_P + D_P u1
    let y1_c = &cp_ext + p.d() * &ku;
    let y1_d = p.d() * &kd;
    let mut pc = DMatrix::zeros(m + q, n);
    pc.view_mut((0, 0), (m, n)).copy_from(&ku);
    pc.view_mut((m, 0), (q, n)).copy_from(&y1_c);
    let mut pd = DMatrix::zeros(m + q, m + q);
    pd.view_mut((0, 0), (m, m + q)).copy_from(&kd);
    pd.view_mut((m, 0), (q, m + q)).copy_from(&y1_d);

    let pi = StateSpaceModel::new(a.clone(), b.clone(), pc.clone(), pd.clone())?;
    let dual = StateSpaceModel::new(a, b, -pc, DMatrix::identity(m + q, m + q) - pd)?;
    Ok(ParallelProjection { pi, dual })
}

/// Well-posed and `Π` (after removing hidden modes) is stable.
pub fn internal_stability(plant: &StateSpaceModel, controller: &StateSpaceModel) -> bool {
    match parallel_projection(plant, controller) {
        Ok(proj) => proj.pi.minimal_realization(MINREAL_TOL).is_hurwitz(),
        Err(_) => false,
    }
}

/// `b_{P,C} = 1/‖Π‖∞`, defined as 0 for unstable or ill-posed loops.
pub fn stability_margin(plant: &StateSpaceModel, controller: &StateSpaceModel) -> f64 {
    let Ok(proj) = parallel_projection(plant, controller) else { return 0.0 };
    let pi = proj.pi.minimal_realization(MINREAL_TOL);
    if !pi.is_hurwitz() {
        return 0.0;
    }
    match pi.hinf_norm() {
        Ok(norm) if norm > 0.0 => (1.0 / norm).min(1.0),
        _ => 0.0,
    }
}

/// Upper bound `√(1 − ‖[M; N]‖_H²)` on the margin any controller can reach.
pub fn max_stability_margin(plant: &StateSpaceModel) -> Result<f64, MarginError> {
    let fact = graphsym::normalized_rcf(plant)?;
    if fact.m.states() == 0 {
        return Ok(1.0);
    }
    let sym = fact.symbol();
    let lc = linalg::solve_lyapunov(sym.a(), &(sym.b() * sym.b().transpose())).map_err(LtiError::from)?;
    let lo = linalg::solve_lyapunov(&sym.a().transpose(), &(sym.c().transpose() * sym.c())).map_err(LtiError::from)?;
    let rho = (lc * lo).complex_eigenvalues().iter().map(|l| l.re).fold(0.0, f64::max);
    Ok((1.0 - rho).max(0.0).sqrt())
}

/// `(b_{P,C}, b_{C,P})`; equal for LTI pairs.
pub fn swap_symmetry_check(plant: &StateSpaceModel, controller: &StateSpaceModel) -> (f64, f64) {
    (stability_margin(plant, controller), stability_margin(controller, plant))
}

/// Smallest principal angle between `G_P(jω)` and `G′_C(jω)`, with the unit
/// principal vectors `(g, h)` phased so that `gᴴh ≥ 0`.
#[derive(Debug, Clone)]
pub struct GraphAngle {
    pub omega: f64,
    pub theta: f64,
    pub g: DVector<Complex64>,
    pub h: DVector<Complex64>,
}

pub fn graph_angle_from_responses(omega: f64, gp: &CMatrix, gc: &CMatrix) -> Option<GraphAngle> {
    let (theta, g, h) = linalg::min_principal_angle(gp, gc)?;
    Some(GraphAngle { omega, theta, g, h })
}

/// Per-frequency graph angle from the two symbols.
pub fn graph_angle_at(
    plant: &CoprimeFactorization,
    controller: &CoprimeFactorization,
    omega: f64,
) -> Result<Option<GraphAngle>, LtiError> {
    Ok(graph_angle_from_responses(omega, &plant.response(omega)?, &controller.response(omega)?))
}

/// Graph angles on `{0} ∪ grid`.
pub fn graph_angle_profile(
    plant: &CoprimeFactorization,
    controller: &CoprimeFactorization,
    grid: &FrequencyGrid,
) -> Result<Vec<GraphAngle>, LtiError> {
    std::iter::once(0.0)
        .chain(grid.omegas().iter().copied())
        .filter_map(|w| graph_angle_at(plant, controller, w).transpose())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn integrator() -> StateSpaceModel {
        StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap()
    }

    fn k(v: f64) -> StateSpaceModel {
        StateSpaceModel::scalar_gain(v)
    }

    fn static_margin(p: f64, c: f64) -> f64 {
        (1.0 - p * c).abs() / ((1.0 + p * p) * (1.0 + c * c)).sqrt()
    }

    #[test]
    fn zero_loop_projection() {
        let proj = parallel_projection(&k(0.0), &k(0.0)).unwrap();
        assert_eq!(proj.pi.d(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn static_projection_closed_form() {
        let proj = parallel_projection(&k(1.0), &k(-1.0)).unwrap();
        assert_eq!(proj.pi.d(), &DMatrix::from_element(2, 2, 0.5));
        let (p, c) = (0.7, 0.4);
        let proj = parallel_projection(&k(p), &k(c)).unwrap();
        let g = 1.0 / (1.0 - p * c);
        let expect = DMatrix::from_row_slice(2, 2, &[g, -c * g, p * g, -p * c * g]);
        assert!((proj.pi.d() - expect).norm() < 1e-15);
    }

    #[test]
    fn projection_identities_on_grid() {
        let p = StateSpaceModel::from_transfer_function(&[1.0, 2.0], &[1.0, 3.0, 1.0]).unwrap();
        let c = StateSpaceModel::from_transfer_function(&[-0.5], &[1.0, 4.0]).unwrap();
        assert!(internal_stability(&p, &c));
        let proj = parallel_projection(&p, &c).unwrap();
        for &w in FrequencyGrid::log_spaced(1e-3, 1e3, 60).unwrap().omegas() {
            let pi = proj.pi.freq_response(w).unwrap();
            let du = proj.dual.freq_response(w).unwrap();
            assert!((&pi + du - CMatrix::identity(2, 2)).norm() < 1e-8);
            assert!((&pi * &pi - &pi).norm() < 1e-6);
        }
    }

    #[test]
    fn internal_stability_examples() {
        assert!(internal_stability(&integrator(), &k(-1.0)));
        assert!(!internal_stability(&k(1.0), &k(1.0)));
        assert!(!internal_stability(&integrator(), &k(0.0)));
        // negative-feedback sign is destabilizing under this convention
        assert!(!internal_stability(&integrator(), &k(1.0)));
    }

    #[test]
    fn margin_examples() {
        assert_abs_diff_eq!(stability_margin(&k(0.0), &k(0.0)), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stability_margin(&k(2.0), &k(0.0)), 1.0 / 5f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(stability_margin(&integrator(), &k(-1.0)), FRAC_1_SQRT_2, epsilon = 1e-4);
        assert_eq!(stability_margin(&integrator(), &k(0.0)), 0.0);
        assert_eq!(stability_margin(&k(1.0), &k(1.0)), 0.0);
    }

    #[test]
    fn margin_matches_static_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (p, c): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            if (1.0 - p * c).abs() <= 0.01 {
                continue;
            }
            assert_abs_diff_eq!(stability_margin(&k(p), &k(c)), static_margin(p, c), epsilon = 1e-9);
        }
    }

    #[test]
    fn siso_margin_matches_frequency_formula() {
        let p = StateSpaceModel::from_transfer_function(&[2.0], &[1.0, 1.0, 1.0]).unwrap();
        let c = StateSpaceModel::from_transfer_function(&[-0.3, -0.2], &[1.0, 2.0]).unwrap();
        let b = stability_margin(&p, &c);
        let mut inv_b: f64 = 0.0;
        for &w in FrequencyGrid::log_spaced(1e-4, 1e4, 4000).unwrap().omegas() {
            let pw = p.freq_response(w).unwrap()[(0, 0)];
            let cw = c.freq_response(w).unwrap()[(0, 0)];
            let v = ((1.0 + pw.norm_sqr()) * (1.0 + cw.norm_sqr())).sqrt() / (1.0 - cw * pw).norm();
            inv_b = inv_b.max(v);
        }
        assert!((1.0 / inv_b - b).abs() < 1e-4);
    }

    #[test]
    fn optimal_margin() {
        assert_eq!(max_stability_margin(&k(3.0)).unwrap(), 1.0);
        assert_abs_diff_eq!(max_stability_margin(&integrator()).unwrap(), FRAC_1_SQRT_2, epsilon = 1e-6);
        let bopt = max_stability_margin(&integrator()).unwrap();
        for c in [-0.3, -1.0, -2.0, -5.0] {
            assert!(stability_margin(&integrator(), &k(c)) <= bopt + 1e-4);
        }
    }

    #[test]
    fn swap_symmetry() {
        let (b1, b2) = swap_symmetry_check(&integrator(), &k(-1.0));
        assert_abs_diff_eq!(b1, FRAC_1_SQRT_2, epsilon = 1e-4);
        assert_abs_diff_eq!(b2, FRAC_1_SQRT_2, epsilon = 1e-4);
        let (b1, b2) = swap_symmetry_check(&k(2.0), &k(0.0));
        assert_abs_diff_eq!(b1, 1.0 / 5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(b2, 1.0 / 5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(swap_symmetry_check(&k(0.0), &k(0.0)), (1.0, 1.0));
    }

    #[test]
    fn integrator_graph_angle_is_constant() {
        let pf = graphsym::normalized_rcf(&integrator()).unwrap();
        let cf = graphsym::inverse_graph_symbol(&k(-1.0)).unwrap();
        let profile = graph_angle_profile(&pf, &cf, &FrequencyGrid::log_spaced(1e-3, 1e3, 30).unwrap()).unwrap();
        for a in profile {
            assert_abs_diff_eq!(a.theta, std::f64::consts::FRAC_PI_4, epsilon = 1e-10);
        }
    }
}

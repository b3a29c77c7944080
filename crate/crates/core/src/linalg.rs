//! Dense linear-algebra kernels shared by the control routines: complex
//! Schur with eigenvalue reordering, Lyapunov and Riccati solvers, ranks,
//! orthonormal bases and principal angles.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Schur decomposition did not converge")]
    SchurFailure,
    #[error("singular system in {0}")]
    Singular(&'static str),
    #[error("no stabilizing Riccati solution: {0}")]
    Riccati(String),
    #[error("non-finite matrix entries")]
    NonFinite,
}

pub fn to_complex(a: &DMatrix<f64>) -> CMatrix {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Largest singular value of a complex matrix (0 for empty matrices, NaN for
/// non-finite input).
pub fn sigma_max_c(a: &CMatrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    a.clone().singular_values().max()
}

/// Largest singular value (0 for empty matrices, NaN for non-finite input).
pub fn sigma_max(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    a.clone().singular_values().max()
}

/// Complex Schur form `A = Z T Zᴴ` with `T` upper triangular.
pub fn complex_schur(a: &CMatrix) -> Result<(CMatrix, CMatrix), LinalgError> {
    let n = a.nrows();
    if n == 0 {
        return Ok((CMatrix::zeros(0, 0), CMatrix::zeros(0, 0)));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000).ok_or(LinalgError::SchurFailure)?;
    let (mut z, mut t) = schur.unpack();
    // Split any 2×2 bumps that survive the QR sweep.
    let scale = t.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    for k in 0..n.saturating_sub(1) {
        let sub = t[(k + 1, k)];
        if sub.norm() <= 1e-14 * scale {
            t[(k + 1, k)] = Complex64::new(0.0, 0.0);
            continue;
        }
        // eigenvector of the 2×2 block for one of its eigenvalues
        let (a11, a12, a21, a22) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
        let half = (a11 - a22) * 0.5;
        let disc = (half * half + a12 * a21).sqrt();
        let lam = (a11 + a22) * 0.5 + disc;
        let (x1, x2) = if (lam - a22).norm() >= (lam - a11).norm() { (lam - a22, a21) } else { (a12, lam - a11) };
        let rho = (x1.norm_sqr() + x2.norm_sqr()).sqrt();
        if rho == 0.0 {
            continue;
        }
        apply_unitary_2x2(&mut t, &mut z, k, x1 / rho, x2 / rho);
        t[(k + 1, k)] = Complex64::new(0.0, 0.0);
    }
    Ok((z, t))
}

/// Applies the similarity with `G = [[c1, -conj(c2)], [c2, conj(c1)]]` on rows/cols `k, k+1`.
fn apply_unitary_2x2(t: &mut CMatrix, z: &mut CMatrix, k: usize, c1: Complex64, c2: Complex64) {
    let n = t.nrows();
    let g11 = c1;
    let g21 = c2;
    let g12 = -c2.conj();
    let g22 = c1.conj();
    // T ← Gᴴ T
    for j in 0..n {
        let a = t[(k, j)];
        let b = t[(k + 1, j)];
        t[(k, j)] = g11.conj() * a + g21.conj() * b;
        t[(k + 1, j)] = g12.conj() * a + g22.conj() * b;
    }
    // T ← T G, Z ← Z G
    for i in 0..n {
        let a = t[(i, k)];
        let b = t[(i, k + 1)];
        t[(i, k)] = a * g11 + b * g21;
        t[(i, k + 1)] = a * g12 + b * g22;
        let a = z[(i, k)];
        let b = z[(i, k + 1)];
        z[(i, k)] = a * g11 + b * g21;
        z[(i, k + 1)] = a * g12 + b * g22;
    }
}

/// Reorders a complex Schur form so that eigenvalues satisfying `select`
/// lead the diagonal. Returns the number of selected eigenvalues.
pub fn reorder_schur(t: &mut CMatrix, z: &mut CMatrix, select: impl Fn(Complex64) -> bool) -> usize {
    let n = t.nrows();
    let mut target = 0;
    for i in 0..n {
        if !select(t[(i, i)]) {
            continue;
        }
        let mut pos = i;
        while pos > target {
            swap_adjacent(t, z, pos - 1);
            pos -= 1;
        }
        target += 1;
    }
    target
}

/// Swaps diagonal entries `k` and `k+1` of an upper-triangular `T`.
fn swap_adjacent(t: &mut CMatrix, z: &mut CMatrix, k: usize) {
    let a = t[(k, k)];
    let b = t[(k + 1, k + 1)];
    let c = t[(k, k + 1)];
    let x1 = c;
    let x2 = b - a;
    let rho = (x1.norm_sqr() + x2.norm_sqr()).sqrt();
    if rho == 0.0 {
        return;
    }
    apply_unitary_2x2(t, z, k, x1 / rho, x2 / rho);
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
    t[(k, k)] = b;
    t[(k + 1, k + 1)] = a;
}

/// Solves `A X + X Aᵀ + Q = 0` (Bartels–Stewart on the complex Schur form).
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (z, t) = complex_schur(&to_complex(a))?;
    let zh = z.adjoint();
    // T Y + Y Tᴴ = C with C = −Zᴴ Q Z
    let c = -(&zh * to_complex(q) * &z);
    let mut y = CMatrix::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs = c.column(j).into_owned();
        for k in (j + 1)..n {
            let coef = t[(j, k)].conj();
            rhs -= y.column(k) * coef;
        }
        // (T + conj(t_jj) I) y_j = rhs, back substitution
        let shift = t[(j, j)].conj();
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for l in (i + 1)..n {
                s -= t[(i, l)] * y[(l, j)];
            }
            let d = t[(i, i)] + shift;
            if d.norm() < 1e-300 {
                return Err(LinalgError::Singular("lyapunov"));
            }
            y[(i, j)] = s / d;
        }
    }
    let x = &z * y * zh;
    let x = x.map(|v| v.re);
    Ok((&x + x.transpose()) * 0.5)
}

/// Stabilizing solution of `Aᵀ X + X A − X S X + Q = 0` with `S, Q` symmetric
/// positive semidefinite.
///
/// The stable invariant subspace of the Hamiltonian `[[A, −S], [−Q, −Aᵀ]]` is
/// taken from an ordered complex Schur form; an ill-conditioned basis or a
/// poor residual hands over to Newton–Kleinman refinement.
pub fn solve_care(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let (mut z, mut t) = complex_schur(&to_complex(&h))?;
    let hscale = sigma_max(&h).max(1.0);
    let selected = reorder_schur(&mut t, &mut z, |l| l.re < -1e-12 * hscale);
    if selected != n {
        return Err(LinalgError::Riccati(format!(
            "Hamiltonian has {selected} stable eigenvalues, expected {n} (eigenvalues on the imaginary axis?)"
        )));
    }
    let u11 = z.view((0, 0), (n, n)).into_owned();
    let u21 = z.view((n, 0), (n, n)).into_owned();
    let sv = u11.clone().singular_values();
    let cond = sv.max() / sv.min().max(1e-300);

    let mut x = None;
    if cond < 1e10 {
        if let Some(inv) = u11.try_inverse() {
            let xc = u21 * inv;
            let xr = xc.map(|v| v.re);
            x = Some((&xr + xr.transpose()) * 0.5);
        }
    }
    let x0 = match x {
        Some(x) => x,
        None => {
            // Start Kleinman from a stabilizing gain obtained by shifting A.
            initial_stabilizing_guess(a, s)?
        }
    };
    let x = newton_kleinman(a, s, q, x0)?;
    let closed = a - s * &x;
    if !is_stable_matrix(&closed) {
        return Err(LinalgError::Riccati("solution is not stabilizing".into()));
    }
    Ok(x)
}

fn initial_stabilizing_guess(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    // Bass guess X0 = W⁻¹ with (A+βI) W + W (A+βI)ᵀ = 2S, which makes A − S X0 stable.
    let n = a.nrows();
    let beta = sigma_max(a) + 1.0;
    let shifted = a + DMatrix::identity(n, n) * beta;
    let w = solve_lyapunov(&(-&shifted), &(s * 2.0))?;
    w.try_inverse()
        .map(|x| (&x + x.transpose()) * 0.5)
        .ok_or_else(|| LinalgError::Riccati("no stabilizing initial guess (not stabilizable?)".into()))
}

fn care_residual(a: &DMatrix<f64>, s: &DMatrix<f64>, q: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let r = a.transpose() * x + x * a - x * s * x + q;
    r.norm() / (1.0 + q.norm() + x.norm() * (a.norm() + s.norm() * x.norm()))
}

fn newton_kleinman(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    mut x: DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let mut res = care_residual(a, s, q, &x);
    for _ in 0..50 {
        if res < 1e-13 {
            break;
        }
        let ak = a - s * &x;
        if !is_stable_matrix(&ak) {
            break;
        }
        // Akᵀ X⁺ + X⁺ Ak + Q + X S X = 0
        let rhs = q + &x * s * &x;
        let next = solve_lyapunov(&ak.transpose(), &rhs)?;
        let next_res = care_residual(a, s, q, &next);
        if next_res >= res && res < 1e-10 {
            break;
        }
        x = next;
        res = next_res;
    }
    if res > 1e-8 {
        return Err(LinalgError::Riccati(format!("residual {res:.3e} after refinement")));
    }
    Ok(x)
}

/// All eigenvalues strictly in the open left half-plane.
pub fn is_stable_matrix(a: &DMatrix<f64>) -> bool {
    a.nrows() == 0 || a.clone().complex_eigenvalues().iter().all(|l| l.re < -1e-9)
}

/// Orthonormal basis for the column space (SVD rank with relative tolerance).
pub fn orth(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(r, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(r, 0);
    }
    let idx: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > rel_tol * smax).collect();
    DMatrix::from_fn(r, idx.len(), |i, j| u[(i, idx[j])])
}

/// Orthonormal basis for a complex column space.
pub fn orth_c(a: &CMatrix, rel_tol: f64) -> CMatrix {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return CMatrix::zeros(r, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return CMatrix::zeros(r, 0);
    }
    let idx: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > rel_tol * smax).collect();
    CMatrix::from_fn(r, idx.len(), |i, j| u[(i, idx[j])])
}

/// Smallest principal angle between two complex column spaces, with the
/// unit principal vectors `(x, y)` attaining it, phased so `xᴴy` is real
/// and nonnegative.
pub fn min_principal_angle(a: &CMatrix, b: &CMatrix) -> Option<(f64, DVector<Complex64>, DVector<Complex64>)> {
    let qa = orth_c(a, 1e-12);
    let qb = orth_c(b, 1e-12);
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return None;
    }
    let m = qa.adjoint() * &qb;
    let svd = m.svd(true, true);
    let (imax, smax) = svd.singular_values.argmax();
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let x = &qa * u.column(imax);
    let y = &qb * vt.row(imax).adjoint();
    let ip = x.dotc(&y);
    let phase = if ip.norm() > 0.0 { ip / ip.norm() } else { Complex64::new(1.0, 0.0) };
    let y = y * phase.conj();
    let x_norm = x.norm();
    let y_norm = y.norm();
    let cos = smax.min(1.0);
    // sine from the residual keeps precision for small angles
    let resid = &y - &x * x.dotc(&y);
    let sin = (resid.norm() / y_norm.max(1e-300)).min(1.0);
    let theta = if cos > 0.9 { sin.asin() } else { cos.acos() };
    let scale = |v: f64| Complex64::new(1.0 / v, 0.0);
    Some((theta, x * scale(x_norm), y * scale(y_norm)))
}

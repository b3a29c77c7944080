//! Continuous-time LTI state-space models.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, CMatrix, LinalgError};
use crate::signal::{SignalError, SignalTrace};
use crate::syntax::{self, Value};

/// Eigenvalues with real part above `-STABILITY_EPS` count as unstable.
pub const STABILITY_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model contains non-finite entries")]
    NonFinite,
    #[error("jω is (numerically) an eigenvalue of A at ω = {0}")]
    SingularAtFrequency(f64),
    #[error("system is not stable; H∞ norm is infinite")]
    UnstableSystem,
    #[error("bilinear transform is degenerate for dt = {0}")]
    DegenerateStep(f64),
    #[error("state-space text: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// `ẋ = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, LtiError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LtiError::Dimension(format!("A is {}×{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || c.ncols() != n {
            return Err(LtiError::Dimension(format!(
                "A is {n}×{n} but B is {}×{} and C is {}×{}",
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(LtiError::Dimension(format!(
                "D is {}×{}, expected {}×{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        if [&a, &b, &c, &d].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(LtiError::NonFinite);
        }
        Ok(Self { a, b, c, d })
    }

    /// Memoryless model `y = D u`.
    pub fn static_gain(d: DMatrix<f64>) -> Self {
        let (p, m) = d.shape();
        Self::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, m), DMatrix::zeros(p, 0), d)
            .expect("static gain dimensions are consistent")
    }

    pub fn scalar_gain(k: f64) -> Self {
        Self::static_gain(DMatrix::from_element(1, 1, k))
    }

    /// SISO model from a companion-form realization of `num(s)/den(s)`;
    /// coefficients highest power first, `den` monic after normalization and
    /// `deg num ≤ deg den`.
    pub fn from_transfer_function(num: &[f64], den: &[f64]) -> Result<Self, LtiError> {
        let lead = *den.first().ok_or_else(|| LtiError::Dimension("empty denominator".into()))?;
        if lead == 0.0 || num.len() > den.len() {
            return Err(LtiError::Dimension("improper or degenerate transfer function".into()));
        }
        let n = den.len() - 1;
        let den: Vec<f64> = den.iter().map(|v| v / lead).collect();
        let mut padded = vec![0.0; den.len() - num.len()];
        padded.extend(num.iter().map(|v| v / lead));
        let d0 = padded[0];
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == n - 1 {
                -den[n - j]
            } else if j == i + 1 {
                1.0
            } else {
                0.0
            }
        });
        let mut b = DMatrix::zeros(n, 1);
        if n > 0 {
            b[(n - 1, 0)] = 1.0;
        }
        // strictly proper remainder num − d0·den
        let c = DMatrix::from_fn(1, n, |_, j| padded[n - j] - d0 * den[n - j]);
        Self::new(a, b, c, DMatrix::from_element(1, 1, d0))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        if self.states() == 0 {
            return Vec::new();
        }
        self.a.clone().complex_eigenvalues().iter().copied().collect()
    }

    pub fn is_hurwitz(&self) -> bool {
        self.poles().iter().all(|l| l.re < -STABILITY_EPS)
    }

    /// `C (sI − A)⁻¹ B + D` at an arbitrary complex point.
    pub fn eval(&self, s: Complex64) -> Result<CMatrix, LtiError> {
        let n = self.states();
        let d = linalg::to_complex(&self.d);
        if n == 0 {
            return Ok(d);
        }
        let mut m = linalg::to_complex(&(-&self.a));
        for i in 0..n {
            m[(i, i)] += s;
        }
        let lu = m.lu();
        let x = lu
            .solve(&linalg::to_complex(&self.b))
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(LtiError::SingularAtFrequency(s.im))?;
        // guard against near-singular pencils that LU does not flag
        let min_dist = self.poles().iter().map(|l| (l - s).norm()).fold(f64::INFINITY, f64::min);
        if min_dist < 1e-9 {
            return Err(LtiError::SingularAtFrequency(s.im));
        }
        Ok(linalg::to_complex(&self.c) * x + d)
    }

    pub fn freq_response(&self, omega: f64) -> Result<CMatrix, LtiError> {
        self.eval(Complex64::new(0.0, omega))
    }

    /// Largest singular value of the frequency response.
    pub fn sigma_max_at(&self, omega: f64) -> Result<f64, LtiError> {
        Ok(linalg::sigma_max_c(&self.freq_response(omega)?))
    }

    /// H∞ norm by grid scan plus golden-section refinement.
    pub fn hinf_norm(&self) -> Result<f64, LtiError> {
        Ok(self.hinf_peak(&HinfOptions::default())?.value)
    }

    pub fn hinf_peak(&self, opts: &HinfOptions) -> Result<HinfPeak, LtiError> {
        if !self.is_hurwitz() {
            return Err(LtiError::UnstableSystem);
        }
        let at_infinity = linalg::sigma_max(&self.d);
        if self.states() == 0 {
            return Ok(HinfPeak { value: at_infinity, omega: None });
        }
        let mut omegas = opts.grid.omegas().to_vec();
        omegas.push(0.0);
        omegas.extend(self.poles().iter().map(|l| l.im.abs()).filter(|w| *w > 0.0));
        omegas.sort_by(|a, b| a.total_cmp(b));
        omegas.dedup();
        let gains: Vec<f64> = omegas.par_iter().map(|&w| self.sigma_max_at(w)).collect::<Result<_, _>>()?;

        let mut best = HinfPeak { value: at_infinity, omega: None };
        let mut local: Vec<usize> = (0..omegas.len())
            .filter(|&i| (i == 0 || gains[i] >= gains[i - 1]) && (i + 1 == omegas.len() || gains[i] >= gains[i + 1]))
            .collect();
        local.sort_by(|&i, &j| gains[j].total_cmp(&gains[i]));
        local.truncate(opts.refine_peaks);
        for i in local {
            let lo = if i == 0 { omegas[0] } else { omegas[i - 1] };
            let hi = if i + 1 == omegas.len() { omegas[i] * 2.0 + 1.0 } else { omegas[i + 1] };
            let (w, g) = self.golden_section(lo, hi, opts.rel_tol)?;
            let (w, g) = if gains[i] > g { (omegas[i], gains[i]) } else { (w, g) };
            if g > best.value {
                best = HinfPeak { value: g, omega: Some(w) };
            }
        }
        Ok(best)
    }

    fn golden_section(&self, mut lo: f64, mut hi: f64, rel_tol: f64) -> Result<(f64, f64), LtiError> {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let mut f1 = self.sigma_max_at(x1)?;
        let mut f2 = self.sigma_max_at(x2)?;
        let mut prev = f1.max(f2);
        for _ in 0..200 {
            if f1 >= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = self.sigma_max_at(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = self.sigma_max_at(x2)?;
            }
            let cur = f1.max(f2);
            let converged = (cur - prev).abs() <= rel_tol * cur.max(1e-300) && (hi - lo) <= 1e-9 * hi.max(1e-12);
            prev = cur;
            if converged {
                break;
            }
        }
        Ok(if f1 >= f2 { (x1, f1) } else { (x2, f2) })
    }

    /// Bilinear (Tustin) discretization.
    pub fn discretize(&self, dt: f64) -> Result<Discretized, LtiError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LtiError::DegenerateStep(dt));
        }
        let n = self.states();
        if n == 0 {
            return Ok(Discretized {
                dt,
                ad: DMatrix::zeros(0, 0),
                bd: self.b.clone(),
                cd: self.c.clone(),
                dd: self.d.clone(),
            });
        }
        let i = DMatrix::<f64>::identity(n, n);
        let lhs = &i - &self.a * (dt / 2.0);
        let sv = lhs.clone().singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(LtiError::DegenerateStep(dt));
        }
        let m = lhs.try_inverse().ok_or(LtiError::DegenerateStep(dt))?;
        let ad = &m * (&i + &self.a * (dt / 2.0));
        let bd = &m * &self.b * dt;
        let cd = &self.c * &m;
        let dd = &self.d + &cd * &self.b * (dt / 2.0);
        Ok(Discretized { dt, ad, bd, cd, dd })
    }

    /// Zero-initial-state response to `u` (bilinear discretization at `u.dt()`).
    pub fn simulate(&self, u: &SignalTrace) -> Result<SignalTrace, LtiError> {
        if u.channels() != self.inputs() {
            return Err(LtiError::Dimension(format!(
                "input has {} channels, model expects {}",
                u.channels(),
                self.inputs()
            )));
        }
        let disc = self.discretize(u.dt())?;
        let mut x = DVector::zeros(self.states());
        let mut y = DMatrix::zeros(self.outputs(), u.horizon());
        for k in 0..u.horizon() {
            let uk = u.samples().column(k);
            let yk = disc.output(&x, &uk.into_owned());
            y.set_column(k, &yk);
            x = disc.advance(&x, &uk.into_owned());
        }
        Ok(SignalTrace::new(u.dt(), y)?)
    }

    /// Series connection `other ∘ self` (the output of `self` drives `other`).
    pub fn series(&self, other: &StateSpaceModel) -> Result<StateSpaceModel, LtiError> {
        if other.inputs() != self.outputs() {
            return Err(LtiError::Dimension("series connection".into()));
        }
        let (n1, n2) = (self.states(), other.states());
        let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, 0), (n2, n1)).copy_from(&(&other.b * &self.c));
        a.view_mut((n1, n1), (n2, n2)).copy_from(&other.a);
        let mut b = DMatrix::zeros(n1 + n2, self.inputs());
        b.view_mut((0, 0), (n1, self.inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.inputs())).copy_from(&(&other.b * &self.d));
        let mut c = DMatrix::zeros(other.outputs(), n1 + n2);
        c.view_mut((0, 0), (other.outputs(), n1)).copy_from(&(&other.d * &self.c));
        c.view_mut((0, n1), (other.outputs(), n2)).copy_from(&other.c);
        StateSpaceModel::new(a, b, c, &other.d * &self.d)
    }

    /// `self − other` for models with equal input/output dimensions.
    pub fn sub(&self, other: &StateSpaceModel) -> Result<StateSpaceModel, LtiError> {
        if self.inputs() != other.inputs() || self.outputs() != other.outputs() {
            return Err(LtiError::Dimension("parallel connection".into()));
        }
        let (n1, n2) = (self.states(), other.states());
        let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&other.a);
        let mut b = DMatrix::zeros(n1 + n2, self.inputs());
        b.view_mut((0, 0), (n1, self.inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.inputs())).copy_from(&other.b);
        let mut c = DMatrix::zeros(self.outputs(), n1 + n2);
        c.view_mut((0, 0), (self.outputs(), n1)).copy_from(&self.c);
        c.view_mut((0, n1), (self.outputs(), n2)).copy_from(&(-&other.c));
        StateSpaceModel::new(a, b, c, &self.d - &other.d)
    }

    /// State transformation `x = T z`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<StateSpaceModel, LtiError> {
        let ti = t.clone().try_inverse().ok_or_else(|| LtiError::Dimension("singular similarity transform".into()))?;
        StateSpaceModel::new(&ti * &self.a * t, &ti * &self.b, &self.c * t, self.d.clone())
    }

    /// Removes uncontrollable then unobservable states with an orthogonal
    /// staircase; `tol` is relative to the model scale.
    pub fn minimal_realization(&self, tol: f64) -> StateSpaceModel {
        let scale = 1.0 + linalg::sigma_max(&self.a);
        let v = krylov_basis(&self.a, &self.b, tol * scale);
        let a1 = v.transpose() * &self.a * &v;
        let b1 = v.transpose() * &self.b;
        let c1 = &self.c * &v;
        let w = krylov_basis(&a1.transpose(), &c1.transpose(), tol * scale);
        StateSpaceModel { a: w.transpose() * &a1 * &w, b: w.transpose() * b1, c: c1 * &w, d: self.d.clone() }
    }

    /// Parses `A=[[..]] B=[[..]] C=[[..]] D=[[..]]`. For static models
    /// `A`, `B`, `C` may be omitted or empty.
    pub fn parse(text: &str) -> Result<Self, LtiError> {
        let pairs = syntax::parse_pairs(text).map_err(|e| LtiError::Parse(e.to_string()))?;
        let mut blocks: [Option<Vec<Vec<f64>>>; 4] = Default::default();
        for (key, value) in pairs {
            let idx = match key.as_str() {
                "A" => 0,
                "B" => 1,
                "C" => 2,
                "D" => 3,
                other => return Err(LtiError::Parse(format!("unknown block '{other}'"))),
            };
            if blocks[idx].is_some() {
                return Err(LtiError::Parse(format!("block {key} given twice")));
            }
            blocks[idx] = Some(value.as_rows().ok_or_else(|| LtiError::Parse(format!("block {key} is not a matrix")))?);
        }
        let d_rows = blocks[3].take().ok_or_else(|| LtiError::Parse("missing D block".into()))?;
        let d = rows_to_matrix(&d_rows, None)?;
        let a_rows = blocks[0].take().unwrap_or_default();
        let n = a_rows.len();
        let a = rows_to_matrix(&a_rows, Some(n))?;
        let b = match blocks[1].take() {
            Some(rows) if !rows.is_empty() => rows_to_matrix(&rows, None)?,
            _ => DMatrix::zeros(n, d.ncols()),
        };
        let c = match blocks[2].take() {
            Some(rows) if !rows.is_empty() => rows_to_matrix(&rows, None)?,
            _ => DMatrix::zeros(d.nrows(), n),
        };
        Self::new(a, b, c, d)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols_hint: Option<usize>) -> Result<DMatrix<f64>, LtiError> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, cols_hint.unwrap_or(0)));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(LtiError::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::List(
        (0..m.nrows()).map(|i| Value::List((0..m.ncols()).map(|j| Value::Number(m[(i, j)])).collect())).collect(),
    )
}

impl fmt::Display for StateSpaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "A={} B={} C={} D={}",
            matrix_value(&self.a),
            matrix_value(&self.b),
            matrix_value(&self.c),
            matrix_value(&self.d)
        )
    }
}

/// Orthonormal basis of the Krylov space spanned by `b, a b, a² b, ...`.
fn krylov_basis(a: &DMatrix<f64>, b: &DMatrix<f64>, abs_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut basis = DMatrix::<f64>::zeros(n, 0);
    let mut block = b.clone();
    while basis.ncols() < n && block.ncols() > 0 {
        let resid = &block - &basis * (basis.transpose() * &block);
        let fresh = orth_abs(&resid, abs_tol.max(1e-300) * (1.0 + block.norm()));
        if fresh.ncols() == 0 {
            break;
        }
        let k = basis.ncols();
        let mut next = DMatrix::zeros(n, k + fresh.ncols());
        next.view_mut((0, 0), (n, k)).copy_from(&basis);
        next.view_mut((0, k), (n, fresh.ncols())).copy_from(&fresh);
        // re-orthogonalize once for stability
        basis = linalg::orth(&next, 1e-14);
        block = a * fresh;
    }
    basis
}

fn orth_abs(m: &DMatrix<f64>, abs_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(r, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let idx: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > abs_tol).collect();
    DMatrix::from_fn(r, idx.len(), |i, j| u[(i, idx[j])])
}

/// Result of an H∞ norm computation; `omega = None` means the peak is at ω = ∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HinfPeak {
    pub value: f64,
    pub omega: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HinfOptions {
    pub grid: FrequencyGrid,
    pub refine_peaks: usize,
    pub rel_tol: f64,
}

impl Default for HinfOptions {
    fn default() -> Self {
        Self { grid: FrequencyGrid::default(), refine_peaks: 6, rel_tol: 1e-6 }
    }
}

/// Strictly increasing positive frequencies in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub const DEFAULT_MIN: f64 = 1e-4;
    pub const DEFAULT_MAX: f64 = 1e4;
    pub const DEFAULT_POINTS: usize = 400;

    pub fn new(omegas: Vec<f64>) -> Result<Self, LtiError> {
        if omegas.is_empty()
            || omegas.iter().any(|w| !(*w > 0.0 && w.is_finite()))
            || omegas.windows(2).any(|p| p[1] <= p[0])
        {
            return Err(LtiError::Dimension("frequency grid must be positive and strictly increasing".into()));
        }
        Ok(Self { omegas })
    }

    pub fn log_spaced(min: f64, max: f64, points: usize) -> Result<Self, LtiError> {
        if !(min > 0.0 && max > min) || points < 2 {
            return Err(LtiError::Dimension(format!("bad frequency window [{min}, {max}] × {points}")));
        }
        let (l0, l1) = (min.log10(), max.log10());
        Self::new((0..points).map(|i| 10f64.powf(l0 + (l1 - l0) * i as f64 / (points - 1) as f64)).collect())
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self::log_spaced(Self::DEFAULT_MIN, Self::DEFAULT_MAX, Self::DEFAULT_POINTS).unwrap()
    }
}

/// Discrete recurrence `x⁺ = Ad x + Bd u`, `y = Cd x + Dd u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub dt: f64,
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub cd: DMatrix<f64>,
    pub dd: DMatrix<f64>,
}

impl Discretized {
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.cd * x + &self.dd * u
    }

    pub fn advance(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.ad * x + &self.bd * u
    }
}

pub fn is_hurwitz(sys: &StateSpaceModel) -> bool {
    sys.is_hurwitz()
}

pub fn freq_response(sys: &StateSpaceModel, omega: f64) -> Result<CMatrix, LtiError> {
    sys.freq_response(omega)
}

pub fn hinf_norm(sys: &StateSpaceModel) -> Result<f64, LtiError> {
    sys.hinf_norm()
}

pub fn discretize(sys: &StateSpaceModel, dt: f64) -> Result<Discretized, LtiError> {
    sys.discretize(dt)
}

pub fn simulate_lti(sys: &StateSpaceModel, u: &SignalTrace) -> Result<SignalTrace, LtiError> {
    sys.simulate(u)
}

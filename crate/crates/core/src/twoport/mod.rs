//! Uncertain two-port channels: transmission matrices `T = I + Δ`, their
//! cascades, and the equivalent plant/controller graphs they induce.
//!
//! Stage 1 sits next to the plant and stage `l` next to the controller. The
//! plant-side pair `[u; y]` maps forward through `T_1, ..., T_k`; the
//! controller-side pair `[v; w]` maps backward through `T_l⁻¹, ..., T_{k+1}⁻¹`.

mod quartet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use quartet::{PointwiseFn, QuartetKind, UncertaintyQuartet};

use crate::graphsym::{self, CoprimeFactorization, GraphSample};
use crate::signal::SignalTrace;

/// Relative residual at which inversion stops.
pub const INVERSION_TOL: f64 = 1e-10;
/// Minimum iteration budget for inversion.
pub const INVERSION_MIN_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwoPortError {
    #[error("expected {expected} channels, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("inversion did not converge after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("analytic gain bound {analytic} exceeds declared bound {declared}")]
    BoundExceeded { analytic: f64, declared: f64 },
    #[error("bound {0} outside [0, 1)")]
    OutOfRange(f64),
    #[error("stage index {k} outside 0..={l}")]
    StageIndex { k: usize, l: usize },
    #[error("channel spec: {0}")]
    Spec(String),
}

/// Iterations that a contraction of ratio `r` needs to reach `INVERSION_TOL`.
pub fn inversion_budget(r: f64) -> usize {
    if r <= 0.0 {
        return INVERSION_MIN_ITERS;
    }
    let r = r.min(1.0 - 1e-9);
    let needed = ((INVERSION_TOL * (1.0 - r) / 4.0).ln() / r.ln()).ceil() as usize + 10;
    needed.max(INVERSION_MIN_ITERS)
}

/// `T = I + Δ`.
#[derive(Debug, Clone)]
pub struct TransmissionMatrix {
    pub quartet: UncertaintyQuartet,
}

impl TransmissionMatrix {
    pub fn new(quartet: UncertaintyQuartet) -> Self {
        Self { quartet }
    }

    /// Perfect channel `T = I`.
    pub fn perfect(m: usize, p: usize) -> Self {
        Self::new(UncertaintyQuartet::zero(m, p))
    }

    pub fn apply_sample(&self, t: f64, z: &DVector<f64>) -> DVector<f64> {
        z + self.quartet.apply_sample(t, z)
    }

    /// Solves `w + Δ(w) = z` for one sample.
    pub fn invert_sample(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>, TwoPortError> {
        let budget = inversion_budget(self.quartet.declared_bound());
        let zn = z.norm();
        let mut w = z.clone();
        for _ in 0..budget {
            let resid = (&w + self.quartet.apply_sample(t, &w) - z).norm();
            if resid <= INVERSION_TOL * zn {
                return Ok(w);
            }
            w = z - self.quartet.apply_sample(t, &w);
        }
        let residual = (&w + self.quartet.apply_sample(t, &w) - z).norm();
        if residual <= INVERSION_TOL * zn {
            return Ok(w);
        }
        Err(TwoPortError::NoConvergence { iters: budget, residual })
    }
}

/// `z + Δ(z)`.
pub fn apply_transmission(t: &TransmissionMatrix, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
    Ok(z.add(&t.quartet.apply(z)?).expect("Δ preserves shape"))
}

/// Solves `(I + Δ) w = z` by the iteration `w ← z − Δ(w)`.
pub fn invert_transmission(t: &TransmissionMatrix, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
    let budget = inversion_budget(t.quartet.declared_bound());
    let zn = z.l2_norm();
    let mut w = z.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..=budget {
        let dw = t.quartet.apply(&w)?;
        residual = w.add(&dw).and_then(|s| s.sub(z)).expect("same shape").l2_norm();
        if residual <= INVERSION_TOL * zn {
            return Ok(w);
        }
        w = z.sub(&dw).expect("same shape");
    }
    Err(TwoPortError::NoConvergence { iters: budget, residual })
}

/// Ordered cascade of channels, stage 1 at the plant.
#[derive(Debug, Clone)]
pub struct TwoPortChain {
    stages: Vec<TransmissionMatrix>,
    m: usize,
    p: usize,
}

impl TwoPortChain {
    pub fn new(stages: Vec<TransmissionMatrix>, m: usize, p: usize) -> Result<Self, TwoPortError> {
        for s in &stages {
            if s.quartet.partition() != (m, p) {
                return Err(TwoPortError::ShapeMismatch { expected: m + p, got: s.quartet.channels() });
            }
        }
        Ok(Self { stages, m, p })
    }

    pub fn from_quartets(quartets: Vec<UncertaintyQuartet>, m: usize, p: usize) -> Result<Self, TwoPortError> {
        Self::new(quartets.into_iter().map(TransmissionMatrix::new).collect(), m, p)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stages(&self) -> &[TransmissionMatrix] {
        &self.stages
    }

    pub fn partition(&self) -> (usize, usize) {
        (self.m, self.p)
    }

    fn check(&self, k: usize, z: &SignalTrace) -> Result<(), TwoPortError> {
        if k > self.len() {
            return Err(TwoPortError::StageIndex { k, l: self.len() });
        }
        if z.channels() != self.m + self.p {
            return Err(TwoPortError::ShapeMismatch { expected: self.m + self.p, got: z.channels() });
        }
        Ok(())
    }

    /// `[u_k; y_k] = T_k ⋯ T_1 [u; y]`.
    pub fn forward(&self, k: usize, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
        self.check(k, z)?;
        self.stages[..k].iter().try_fold(z.clone(), |acc, t| apply_transmission(t, &acc))
    }

    /// `[v_k; w_k] = T_{k+1}⁻¹ ⋯ T_l⁻¹ [v; w]`.
    pub fn backward(&self, k: usize, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
        self.check(k, z)?;
        self.stages[k..].iter().rev().try_fold(z.clone(), |acc, t| invert_transmission(t, &acc))
    }
}

pub fn chain_forward(chain: &TwoPortChain, k: usize, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
    chain.forward(k, z)
}

pub fn chain_backward(chain: &TwoPortChain, k: usize, z: &SignalTrace) -> Result<SignalTrace, TwoPortError> {
    chain.backward(k, z)
}

/// Sample of `G_{P^e_k} = T_k ⋯ T_1 G_P`.
pub fn equivalent_plant_graph(
    fact: &CoprimeFactorization,
    chain: &TwoPortChain,
    k: usize,
    count: usize,
    horizon: usize,
    dt: f64,
    seed: u64,
) -> Result<GraphSample, TwoPortError> {
    let base = graphsym::sample_graph(fact, count, horizon, dt, seed);
    let points = base.points.iter().map(|z| chain.forward(k, z)).collect::<Result<Vec<_>, _>>()?;
    let symbol = if chain.stages[..k.min(chain.len())].iter().all(is_perfect) { base.symbol } else { None };
    Ok(GraphSample { points, kind: base.kind, symbol })
}

/// Sample of `G′_{C^e_k} = T_{k+1}⁻¹ ⋯ T_l⁻¹ G′_C`.
pub fn equivalent_controller_graph(
    fact: &CoprimeFactorization,
    chain: &TwoPortChain,
    k: usize,
    count: usize,
    horizon: usize,
    dt: f64,
    seed: u64,
) -> Result<GraphSample, TwoPortError> {
    let base = graphsym::sample_graph(fact, count, horizon, dt, seed);
    let points = base.points.iter().map(|z| chain.backward(k, z)).collect::<Result<Vec<_>, _>>()?;
    let symbol = if chain.stages[k.min(chain.len())..].iter().all(is_perfect) { base.symbol } else { None };
    Ok(GraphSample { points, kind: base.kind, symbol })
}

fn is_perfect(t: &TransmissionMatrix) -> bool {
    matches!(t.quartet.kind(), QuartetKind::Zero)
}

/// Operator on traces, used by the empirical probes.
pub trait TraceOperator {
    fn channels(&self) -> usize;
    fn apply_trace(&self, z: &SignalTrace) -> SignalTrace;
}

impl TraceOperator for UncertaintyQuartet {
    fn channels(&self) -> usize {
        UncertaintyQuartet::channels(self)
    }

    fn apply_trace(&self, z: &SignalTrace) -> SignalTrace {
        self.apply(z).expect("probe traces match the quartet shape")
    }
}

const PROBE_DT: f64 = 0.05;
const PROBE_STEPS: usize = 64;

fn random_trace(rng: &mut ChaCha8Rng, channels: usize) -> SignalTrace {
    let scale = 10f64.powf(rng.random_range(-2.0..1.0));
    SignalTrace::from_fn(PROBE_DT, channels, PROBE_STEPS, |_, _| {
        let g: f64 = StandardNormal.sample(&mut *rng);
        scale * g
    })
}

/// Checks that inputs agreeing before a random `τ` give outputs agreeing
/// before `τ`.
pub fn probe_causality(op: &dyn TraceOperator, trials: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = op.channels();
    for _ in 0..trials.max(1) {
        let z1 = random_trace(&mut rng, ch);
        let tau = rng.random_range(1..PROBE_STEPS) as f64 * PROBE_DT;
        let cut = z1.steps_before(tau);
        let other = random_trace(&mut rng, ch);
        let mut s2 = z1.samples().clone();
        for k in cut..PROBE_STEPS {
            s2.set_column(k, &other.samples().column(k));
        }
        let z2 = SignalTrace::new(PROBE_DT, s2).expect("finite samples");
        let y1 = op.apply_trace(&z1).truncate(tau);
        let y2 = op.apply_trace(&z2).truncate(tau);
        let diff = y1.sub(&y2).expect("same shape").samples().amax();
        if diff > 1e-10 {
            return false;
        }
    }
    true
}

/// Largest observed `‖Δz‖/‖z‖` over random, axis-aligned and scaled probes.
pub fn verify_gain_bound(op: &dyn TraceOperator, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = op.channels();
    let mut best: f64 = 0.0;
    let mut record = |z: &SignalTrace| {
        if !z.is_zero() {
            best = best.max(op.apply_trace(z).l2_norm() / z.l2_norm());
        }
    };
    for axis in 0..ch {
        for amp in [1e-2, 1.0, 1e3] {
            record(&SignalTrace::from_fn(PROBE_DT, ch, PROBE_STEPS, |c, _| if c == axis { amp } else { 0.0 }));
        }
    }
    for _ in 0..trials.max(1) {
        record(&random_trace(&mut rng, ch));
        let dir: DVector<f64> = DVector::from_fn(ch, |_, _| StandardNormal.sample(&mut rng));
        let amp = 10f64.powf(rng.random_range(-2.0..3.0));
        record(&SignalTrace::from_fn(PROBE_DT, ch, PROBE_STEPS, |c, _| amp * dir[c]));
    }
    best
}

/// Random catalog chain respecting the bounds `radii`.
pub fn random_chain(radii: &[f64], m: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<TwoPortChain, TwoPortError> {
    let quartets = radii.iter().map(|&r| UncertaintyQuartet::random(r, m, p, rng)).collect::<Result<Vec<_>, _>>()?;
    TwoPortChain::from_quartets(quartets, m, p)
}

/// `diag(I_m, I_p)` scaled static gain; convenience for `K = g·I`.
pub fn scaled_identity(g: f64, r: f64, m: usize, p: usize) -> Result<UncertaintyQuartet, TwoPortError> {
    UncertaintyQuartet::new(QuartetKind::StaticGain(DMatrix::identity(m + p, m + p) * g), r, m, p)
}

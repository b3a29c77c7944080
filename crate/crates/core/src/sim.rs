//! Time-domain simulation of the cascaded loop.
//!
//! Plant and controller are discretized with the bilinear rule. At every
//! step the static loop equations are solved for the plant input `u` and
//! the controller input `w`:
//!
//! ```text
//! T_l ⋯ T_{k+1} (I_k − T_k ⋯ T_1 [u; y]) = [v; w],   y = P u,  v = C w
//! ```
//!
//! where `I_k` is the disturbance injected at interface `k`. Each interface
//! `j` carries a plant-side pair `[u_j; y_j] = T_j ⋯ T_1 [u; y]` and a
//! controller-side pair `[v_j; w_j] = T_{j+1}⁻¹ ⋯ T_l⁻¹ [v; w]`.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{AnalysisError, NetworkModel};
use crate::graphsym;
use crate::lti::{Discretized, LtiError, StateSpaceModel};
use crate::signal::SignalTrace;
use crate::twoport::{TwoPortChain, TwoPortError, UncertaintyQuartet};

/// Energy ratio `‖O‖²/‖I‖²` above which a run counts as a blowup.
pub const BLOWUP_ENERGY_RATIO: f64 = 1e6;
/// Fraction of the output energy allowed in the last quarter of a run.
pub const TAIL_ENERGY_FRACTION: f64 = 1e-6;
/// Largest relative gain change between horizon `T` and `2T` for a run
/// to count as settled.
pub const DOUBLING_TOLERANCE: f64 = 0.05;
/// Static loop gain above which a delay is inserted at the controller input.
pub const CONTRACTION_LIMIT: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {k} outside 0..={l}")]
    StageIndex { k: usize, l: usize },
    #[error("injection has {got} channels, interface has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("static loop gain {0:.3} is not contractive and delay insertion is disabled")]
    LoopNotContractive(f64),
    #[error("loop equations did not converge at step {step} (relative residual {residual:.3e})")]
    NoConvergence { step: usize, residual: f64 },
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    TwoPort(#[from] TwoPortError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: usize,
    pub loop_tolerance: f64,
    pub max_loop_iters: usize,
    pub seed: u64,
    /// Insert a one-step delay when the static loop is not contractive.
    pub allow_delay: bool,
    /// Injections per gain estimate.
    pub ensemble: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 2000,
            loop_tolerance: 1e-10,
            max_loop_iters: 200,
            seed: 0,
            allow_delay: true,
            ensemble: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon < 2 {
            return Err(SimError::Config(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        if self.loop_tolerance.is_nan() || self.loop_tolerance <= 0.0 || self.max_loop_iters == 0 {
            return Err(SimError::Config("loop tolerance and iteration budget must be positive".into()));
        }
        if self.ensemble == 0 {
            return Err(SimError::Config("ensemble must be at least 1".into()));
        }
        Ok(())
    }
}

/// All internal signals of one run.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub stage: usize,
    /// `I_k = [p_k; q_k]`.
    pub injection: SignalTrace,
    /// `[u_j; y_j]` for `j = 0..=l`.
    pub plant_side: Vec<SignalTrace>,
    /// `[v_j; w_j]` for `j = 0..=l`.
    pub controller_side: Vec<SignalTrace>,
    pub delay_inserted: bool,
    /// Largest relative loop residual over all steps.
    pub max_loop_residual: f64,
    m: usize,
    p: usize,
}

impl ClosedLoopTrace {
    pub fn stages(&self) -> usize {
        self.plant_side.len() - 1
    }

    pub fn u(&self, j: usize) -> SignalTrace {
        self.plant_side[j].channel_range(0, self.m)
    }

    pub fn y(&self, j: usize) -> SignalTrace {
        self.plant_side[j].channel_range(self.m, self.p)
    }

    pub fn v(&self, j: usize) -> SignalTrace {
        self.controller_side[j].channel_range(0, self.m)
    }

    pub fn w(&self, j: usize) -> SignalTrace {
        self.controller_side[j].channel_range(self.m, self.p)
    }

    /// `O = [u_0; w_0; u_1; w_1; ...; u_l; w_l]`.
    pub fn output_stack(&self) -> SignalTrace {
        let dt = self.injection.dt();
        let h = self.injection.horizon();
        let per = self.m + self.p;
        let mut out = DMatrix::zeros(per * self.plant_side.len(), h);
        for j in 0..self.plant_side.len() {
            out.view_mut((j * per, 0), (self.m, h)).copy_from(&self.plant_side[j].samples().rows(0, self.m));
            out.view_mut((j * per + self.m, 0), (self.p, h))
                .copy_from(&self.controller_side[j].samples().rows(self.m, self.p));
        }
        SignalTrace::new(dt, out).expect("finite simulation output")
    }
}

/// Discretized loop with a concrete channel cascade.
#[derive(Debug, Clone)]
pub struct LoopSimulator {
    plant: Discretized,
    controller: Discretized,
    chain: TwoPortChain,
    delay: bool,
    config: SimConfig,
}

impl LoopSimulator {
    pub fn new(
        plant: &StateSpaceModel,
        controller: &StateSpaceModel,
        chain: TwoPortChain,
        config: &SimConfig,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let (m, p) = (plant.inputs(), plant.outputs());
        if chain.partition() != (m, p) || controller.inputs() != p || controller.outputs() != m {
            return Err(SimError::ShapeMismatch { expected: m + p, got: chain.partition().0 + chain.partition().1 });
        }
        let pd = plant.discretize(config.dt)?;
        let cd = controller.discretize(config.dt)?;
        let amplification: f64 = chain
            .stages()
            .iter()
            .map(|t| {
                let r = t.quartet.declared_bound();
                (1.0 + r) / (1.0 - r)
            })
            .product();
        let gain = crate::linalg::sigma_max(&pd.dd) * crate::linalg::sigma_max(&cd.dd) * amplification;
        let delay = if gain >= CONTRACTION_LIMIT {
            if !config.allow_delay {
                return Err(SimError::LoopNotContractive(gain));
            }
            true
        } else {
            false
        };
        Ok(Self { plant: pd, controller: cd, chain, delay, config: config.clone() })
    }

    pub fn delay_inserted(&self) -> bool {
        self.delay
    }

    pub fn chain(&self) -> &TwoPortChain {
        &self.chain
    }

    /// Runs the loop with `injection` entering at interface `k`.
    pub fn run(&self, k: usize, injection: &SignalTrace) -> Result<ClosedLoopTrace, SimError> {
        let l = self.chain.len();
        if k > l {
            return Err(SimError::StageIndex { k, l });
        }
        let (m, p) = self.chain.partition();
        if injection.channels() != m + p {
            return Err(SimError::ShapeMismatch { expected: m + p, got: injection.channels() });
        }
        let h = injection.horizon();
        let dt = injection.dt();
        let stages = self.chain.stages();
        let mut xp = DVector::zeros(self.plant.ad.nrows());
        let mut xc = DVector::zeros(self.controller.ad.nrows());
        let mut w_prev = DVector::zeros(p);
        let mut z = DVector::zeros(m + p);
        let mut plant_side = vec![DMatrix::zeros(m + p, h); l + 1];
        let mut ctrl_side = vec![DMatrix::zeros(m + p, h); l + 1];
        let mut worst: f64 = 0.0;
        let mut jac: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;

        for step in 0..h {
            let t = step as f64 * dt;
            let d = injection.samples().column(step).into_owned();
            let yp = &self.plant.cd * &xp;
            let yc = &self.controller.cd * &xc;
            let residual = |z: &DVector<f64>| -> DVector<f64> {
                let u = z.rows(0, m).into_owned();
                let w = z.rows(m, p).into_owned();
                let mut pair = DVector::zeros(m + p);
                pair.rows_mut(0, m).copy_from(&u);
                pair.rows_mut(m, p).copy_from(&(&yp + &self.plant.dd * &u));
                for s in &stages[..k] {
                    pair = s.apply_sample(t, &pair);
                }
                let mut n = &d - pair;
                for s in &stages[k..] {
                    n = s.apply_sample(t, &n);
                }
                let w_in = if self.delay { &w_prev } else { &w };
                let mut target = DVector::zeros(m + p);
                target.rows_mut(0, m).copy_from(&(&yc + &self.controller.dd * w_in));
                target.rows_mut(m, p).copy_from(&w);
                n - target
            };
            let scale = d.norm() + yp.norm() + yc.norm() + if self.delay { w_prev.norm() } else { 0.0 };
            let rel = self.solve(&residual, &mut z, scale, &mut jac, step)?;
            worst = worst.max(rel);

            let u = z.rows(0, m).into_owned();
            let w = z.rows(m, p).into_owned();
            let mut pair = DVector::zeros(m + p);
            pair.rows_mut(0, m).copy_from(&u);
            pair.rows_mut(m, p).copy_from(&(&yp + &self.plant.dd * &u));
            plant_side[0].set_column(step, &pair);
            for j in 1..=l {
                pair = stages[j - 1].apply_sample(t, &pair);
                plant_side[j].set_column(step, &pair);
            }
            let mut n = &d - plant_side[k].column(step);
            ctrl_side[k].set_column(step, &n);
            for j in k + 1..=l {
                n = stages[j - 1].apply_sample(t, &n);
                ctrl_side[j].set_column(step, &n);
            }
            let mut back = ctrl_side[k].column(step).into_owned();
            for j in (0..k).rev() {
                back = stages[j].invert_sample(t, &back)?;
                ctrl_side[j].set_column(step, &back);
            }

            let w_in = if self.delay { w_prev.clone() } else { w.clone() };
            xp = self.plant.advance(&xp, &u);
            xc = self.controller.advance(&xc, &w_in);
            w_prev = w;
            if !(xp.iter().all(|v| v.is_finite()) && xc.iter().all(|v| v.is_finite())) {
                return Err(SimError::NoConvergence { step, residual: f64::INFINITY });
            }
        }
        let wrap = |mats: Vec<DMatrix<f64>>| -> Vec<SignalTrace> {
            mats.into_iter().map(|s| SignalTrace::new(dt, s).expect("finite simulation signals")).collect()
        };
        Ok(ClosedLoopTrace {
            stage: k,
            injection: injection.clone(),
            plant_side: wrap(plant_side),
            controller_side: wrap(ctrl_side),
            delay_inserted: self.delay,
            max_loop_residual: worst,
            m,
            p,
        })
    }

    /// Chord-Newton solve of `R(z) = 0` with a finite-difference Jacobian
    /// that is refreshed only when progress stalls. Returns the relative
    /// residual reached.
    fn solve(
        &self,
        residual: &dyn Fn(&DVector<f64>) -> DVector<f64>,
        z: &mut DVector<f64>,
        scale: f64,
        jac: &mut Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
        step: usize,
    ) -> Result<f64, SimError> {
        let tol = self.config.loop_tolerance;
        let mut r = residual(z);
        let rel = |r: &DVector<f64>, z: &DVector<f64>| {
            let s = scale + z.norm();
            if s == 0.0 {
                r.norm()
            } else {
                r.norm() / s
            }
        };
        if rel(&r, z) <= tol {
            return Ok(rel(&r, z));
        }
        if scale == 0.0 {
            // zero data: z = 0 solves the loop since every quartet maps 0 to 0
            z.fill(0.0);
            return Ok(rel(&residual(z), z));
        }
        let mut fresh = false;
        for _ in 0..self.config.max_loop_iters {
            if jac.is_none() {
                *jac = Some(fd_jacobian(residual, z, &r, scale).lu());
                fresh = true;
            }
            let lu = jac.as_ref().expect("jacobian just built");
            let Some(delta) = lu.solve(&(-&r)) else {
                if fresh {
                    break;
                }
                *jac = None;
                continue;
            };
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let cand = &*z + &delta * lambda;
                let rc = residual(&cand);
                if rc.norm() < r.norm() {
                    accepted = Some((cand, rc));
                    break;
                }
                lambda *= 0.5;
            }
            match accepted {
                Some((cand, rc)) => {
                    let ratio = rc.norm() / r.norm();
                    *z = cand;
                    r = rc;
                    if rel(&r, z) <= tol {
                        return Ok(rel(&r, z));
                    }
                    if ratio > 0.25 {
                        if !fresh {
                            *jac = None;
                        }
                    } else {
                        fresh = false;
                    }
                }
                None => {
                    if fresh {
                        break;
                    }
                    *jac = None;
                }
            }
        }
        Err(SimError::NoConvergence { step, residual: rel(&r, z) })
    }
}

fn fd_jacobian(
    residual: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    z: &DVector<f64>,
    r0: &DVector<f64>,
    scale: f64,
) -> DMatrix<f64> {
    let n = z.len();
    let mut j = DMatrix::zeros(r0.len(), n);
    let base = scale.max(z.norm()).max(1e-300);
    for i in 0..n {
        let h = 1e-7 * base.max(z[i].abs());
        let mut zp = z.clone();
        zp[i] += h;
        let col = (residual(&zp) - r0) / h;
        j.set_column(i, &col);
    }
    j
}

/// Runs the network with its concrete quartets.
pub fn simulate_ncs(
    network: &NetworkModel,
    k: usize,
    injection: &SignalTrace,
    config: &SimConfig,
) -> Result<ClosedLoopTrace, SimError> {
    let chain = network.concrete_chain()?;
    LoopSimulator::new(network.plant(), network.controller(), chain, config)?.run(k, injection)
}

/// Why a run was flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlowupReason {
    /// `‖O‖² > 10⁶ ‖I‖²`.
    EnergyGrowth,
    /// The gain over `2T` differs from the gain over `T` by more than 5 %.
    HorizonDoubling,
    /// The output has not settled: its last quarter still carries more
    /// than `10⁻⁶` of the output energy.
    NonDecaying,
    /// States or signals left the finite range.
    NonFinite,
}

impl BlowupReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlowupReason::EnergyGrowth => "energy-growth",
            BlowupReason::HorizonDoubling => "horizon-doubling",
            BlowupReason::NonDecaying => "non-decaying",
            BlowupReason::NonFinite => "non-finite",
        }
    }
}

/// Gain estimate for the map from `I_k` to `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainEstimate {
    /// `max ‖O‖/‖I_k‖` over the full `2T` run.
    pub gain: f64,
    /// Same maximum over the first `T` steps.
    pub gain_half: f64,
    /// Largest relative change between the `T` and `2T` gains.
    pub doubling_change: f64,
    pub blowup: Option<BlowupReason>,
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// Gain estimate with the simulator's chain. Injection `e` of the ensemble
/// is band-limited noise over `horizon` steps drawn from a seed derived
/// from `(seed, k, e)`, padded with `horizon` zeros.
pub fn estimate_gain_with(sim: &LoopSimulator, k: usize, ensemble: usize, seed: u64) -> Result<GainEstimate, SimError> {
    let cfg = &sim.config;
    let (m, p) = sim.chain.partition();
    let mut est = GainEstimate { gain: 0.0, gain_half: 0.0, doubling_change: 0.0, blowup: None };
    for e in 0..ensemble.max(1) {
        let inj = probe_injection(m + p, cfg, seed, k, e);
        let energy_in = inj.energy();
        let trace = match sim.run(k, &inj) {
            Ok(t) => t,
            Err(SimError::NoConvergence { residual, .. }) if !residual.is_finite() => {
                est.blowup = Some(BlowupReason::NonFinite);
                est.gain = f64::INFINITY;
                return Ok(est);
            }
            Err(e) => return Err(e),
        };
        let out = trace.output_stack();
        let full = out.energy();
        let half = out.prefix(cfg.horizon).energy();
        let tail = full - out.prefix(3 * cfg.horizon / 2).energy();
        let (g2, g1) = ((full / energy_in).sqrt(), (half / energy_in).sqrt());
        let change = if g1 > 0.0 { (g2 - g1) / g1 } else { 0.0 };
        est.gain = est.gain.max(g2);
        est.gain_half = est.gain_half.max(g1);
        est.doubling_change = est.doubling_change.max(change);
        if !full.is_finite() {
            est.blowup = Some(BlowupReason::NonFinite);
        } else if full > BLOWUP_ENERGY_RATIO * energy_in {
            est.blowup.get_or_insert(BlowupReason::EnergyGrowth);
        } else if change > DOUBLING_TOLERANCE {
            est.blowup.get_or_insert(BlowupReason::HorizonDoubling);
        } else if tail > TAIL_ENERGY_FRACTION * full {
            est.blowup.get_or_insert(BlowupReason::NonDecaying);
        }
    }
    Ok(est)
}

/// Lower bound on `‖A_k‖` from `ensemble` random injections.
pub fn estimate_gain(
    network: &NetworkModel,
    k: usize,
    ensemble: usize,
    config: &SimConfig,
) -> Result<GainEstimate, SimError> {
    let sim = LoopSimulator::new(network.plant(), network.controller(), network.concrete_chain()?, config)?;
    estimate_gain_with(&sim, k, ensemble, config.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blowup {
    pub trial: usize,
    pub stage: usize,
    pub reason: BlowupReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

/// Aggregate over Monte Carlo trials.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloStats {
    pub trials: usize,
    /// Interfaces examined.
    pub stages: Vec<usize>,
    /// Largest gain seen at each examined interface.
    pub max_gain: Vec<f64>,
    /// Largest horizon-doubling change at each interface.
    pub max_doubling_change: Vec<f64>,
    pub blowups: Vec<Blowup>,
    pub failures: Vec<TrialFailure>,
    pub delay_inserted: bool,
}

struct TrialResult {
    gains: Vec<GainEstimate>,
    delay: bool,
}

/// Loop for Monte Carlo trial `trial`: channels without a concrete quartet
/// get catalog quartets drawn from the trial's derived seed, which is
/// returned alongside.
pub fn trial_simulator(
    network: &NetworkModel,
    trial: usize,
    config: &SimConfig,
) -> Result<(LoopSimulator, u64), SimError> {
    let seed = derive_seed(config.seed, u64::MAX, trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = network.draw_chain(&mut rng)?;
    Ok((LoopSimulator::new(network.plant(), network.controller(), chain, config)?, seed))
}

/// Injection `e` of the gain ensemble at interface `k`.
pub fn probe_injection(channels: usize, config: &SimConfig, seed: u64, k: usize, e: usize) -> SignalTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, e as u64));
    graphsym::band_limited_noise(channels, config.horizon, config.dt, &mut rng).zero_pad(2 * config.horizon)
}

/// Draws catalog quartets for every channel without a concrete one and
/// estimates the gain at every interface; trials run in parallel.
pub fn monte_carlo_robustness(
    network: &NetworkModel,
    trials: usize,
    config: &SimConfig,
) -> Result<MonteCarloStats, SimError> {
    let all: Vec<usize> = (0..=network.channels().len()).collect();
    monte_carlo_robustness_at(network, trials, config, &all)
}

/// Monte Carlo restricted to the interfaces in `stages`.
pub fn monte_carlo_robustness_at(
    network: &NetworkModel,
    trials: usize,
    config: &SimConfig,
    stages: &[usize],
) -> Result<MonteCarloStats, SimError> {
    config.validate()?;
    if trials == 0 {
        return Err(SimError::Config("at least one trial is required".into()));
    }
    let l = network.channels().len();
    if let Some(&k) = stages.iter().find(|&&k| k > l) {
        return Err(SimError::StageIndex { k, l });
    }
    let results: Vec<(usize, Result<TrialResult, SimError>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let run = || -> Result<TrialResult, SimError> {
                let (sim, seed) = trial_simulator(network, trial, config)?;
                let gains = stages
                    .iter()
                    .map(|&k| estimate_gain_with(&sim, k, config.ensemble, seed))
                    .collect::<Result<_, _>>()?;
                Ok(TrialResult { gains, delay: sim.delay })
            };
            (trial, run())
        })
        .collect();
    let mut stats = MonteCarloStats {
        trials,
        stages: stages.to_vec(),
        max_gain: vec![0.0; stages.len()],
        max_doubling_change: vec![0.0; stages.len()],
        blowups: Vec::new(),
        failures: Vec::new(),
        delay_inserted: false,
    };
    for (trial, res) in results {
        match res {
            Ok(r) => {
                stats.delay_inserted |= r.delay;
                for (i, g) in r.gains.iter().enumerate() {
                    stats.max_gain[i] = stats.max_gain[i].max(g.gain);
                    stats.max_doubling_change[i] = stats.max_doubling_change[i].max(g.doubling_change);
                    if let Some(reason) = g.blowup {
                        stats.blowups.push(Blowup { trial, stage: stages[i], reason });
                    }
                }
            }
            Err(e) => stats.failures.push(TrialFailure { trial, message: e.to_string() }),
        }
    }
    Ok(stats)
}

/// One step of a ratio sequence: quartets for every channel and the
/// injection amplitude `β`.
#[derive(Debug, Clone)]
pub struct ReplayStep {
    pub beta: f64,
    pub predicted: f64,
    pub quartets: Vec<UncertaintyQuartet>,
}

/// Everything needed to re-run a ratio sequence in the time domain.
#[derive(Debug, Clone)]
pub struct ReplaySpec {
    /// Interface receiving the injection.
    pub stage: usize,
    pub omega: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Unit injection direction `e`; the injection is `β w(t) cos(ωt) e`.
    pub direction: DVector<f64>,
    pub steps: Vec<ReplayStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub beta: f64,
    pub predicted: f64,
    /// `‖[u_k; y_k]‖ / ‖I_k‖`.
    pub observed: f64,
}

impl ReplaySpec {
    pub fn injection(&self, beta: f64) -> SignalTrace {
        let dir = self.direction.map(|x| num_complex::Complex64::new(beta * x, 0.0));
        graphsym::windowed_sinusoid(&dir, self.omega, self.dt, self.horizon)
    }
}

/// Re-runs every step of the sequence and measures the projection ratio.
pub fn replay_certificate(
    plant: &StateSpaceModel,
    controller: &StateSpaceModel,
    spec: &ReplaySpec,
) -> Result<Vec<ReplayRow>, SimError> {
    let (m, p) = (plant.inputs(), plant.outputs());
    let config = SimConfig { dt: spec.dt, horizon: spec.horizon, ..SimConfig::default() };
    spec.steps
        .iter()
        .map(|step| {
            let chain = TwoPortChain::from_quartets(step.quartets.clone(), m, p)?;
            let sim = LoopSimulator::new(plant, controller, chain, &config)?;
            let inj = spec.injection(step.beta);
            let trace = sim.run(spec.stage, &inj)?;
            let observed = trace.plant_side[spec.stage].l2_norm() / inj.l2_norm();
            Ok(ReplayRow { beta: step.beta, predicted: step.predicted, observed })
        })
        .collect()
}

/// `observed_last / observed_first`.
pub fn growth(rows: &[ReplayRow]) -> f64 {
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if a.observed > 0.0 => b.observed / a.observed,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Channel;
    use crate::margin;
    use crate::twoport::{scaled_identity, QuartetKind};
    use approx::assert_abs_diff_eq;

    fn integrator() -> StateSpaceModel {
        StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).unwrap()
    }

    fn network(quartets: Vec<UncertaintyQuartet>) -> NetworkModel {
        let chans = quartets.into_iter().enumerate().map(|(i, q)| Channel::with_quartet(format!("c{i}"), q)).collect();
        NetworkModel::new(integrator(), StateSpaceModel::scalar_gain(-1.0), chans).unwrap()
    }

    fn cfg(horizon: usize) -> SimConfig {
        SimConfig { horizon, ..SimConfig::default() }
    }

    fn noise(horizon: usize, seed: u64) -> SignalTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        graphsym::band_limited_noise(2, horizon, 0.01, &mut rng)
    }

    #[test]
    fn zero_injection_gives_zero_signals() {
        let net = network(vec![scaled_identity(0.2, 0.2, 1, 1).unwrap()]);
        let tr = simulate_ncs(&net, 1, &SignalTrace::zeros(0.01, 2, 50), &cfg(50)).unwrap();
        assert!(tr.output_stack().is_zero());
        assert!(tr.controller_side.iter().all(|s| s.is_zero()));
    }

    #[test]
    fn direct_loop_matches_projection_simulation() {
        let net = network(vec![]);
        let d = noise(400, 1);
        let tr = simulate_ncs(&net, 0, &d, &cfg(400)).unwrap();
        let proj = margin::parallel_projection(net.plant(), net.controller()).unwrap();
        // Π d = [u1; y1] and y2 = d2 − y1
        let pi = proj.pi.simulate(&d).unwrap();
        let u_ref = pi.channel_range(0, 1);
        let w_ref = d.channel_range(1, 1).sub(&pi.channel_range(1, 1)).unwrap();
        let err_u = tr.u(0).sub(&u_ref).unwrap().samples().amax();
        let err_w = tr.w(0).sub(&w_ref).unwrap().samples().amax();
        assert!(err_u < 1e-6 && err_w < 1e-6, "{err_u} {err_w}");
        assert!(tr.max_loop_residual <= 1e-10);
    }

    #[test]
    fn perfect_channels_do_not_depend_on_stage() {
        let net = network(vec![UncertaintyQuartet::zero(1, 1), UncertaintyQuartet::zero(1, 1)]);
        let d = noise(200, 2);
        let base = simulate_ncs(&net, 0, &d, &cfg(200)).unwrap();
        for k in 1..=2 {
            let tr = simulate_ncs(&net, k, &d, &cfg(200)).unwrap();
            for j in 0..=2 {
                let e = tr.plant_side[j].sub(&base.plant_side[0]).unwrap().samples().amax();
                assert!(e < 1e-9);
            }
        }
    }

    #[test]
    fn stage_relations_hold() {
        let q1 = UncertaintyQuartet::new(QuartetKind::Saturation { alpha: 0.15, level: 0.05 }, 0.2, 1, 1).unwrap();
        let q2 = UncertaintyQuartet::new(QuartetKind::TimeVaryingGain { amp: 0.2, freq: 3.0, phase: 0.1 }, 0.2, 1, 1)
            .unwrap();
        let net = network(vec![q1, q2]);
        let d = noise(300, 3);
        let tr = simulate_ncs(&net, 1, &d, &cfg(300)).unwrap();
        let chain = net.concrete_chain().unwrap();
        // I_k = m_k + n_k, m_l = T_l ⋯ T_1 m_0, n_k = T_{k+1}⁻¹ ⋯ n_l
        let sum = tr.plant_side[1].add(&tr.controller_side[1]).unwrap();
        assert!(sum.sub(&d).unwrap().samples().amax() < 1e-9);
        let fwd = chain.forward(2, &tr.plant_side[0]).unwrap();
        assert!(fwd.sub(&tr.plant_side[2]).unwrap().samples().amax() < 1e-12);
        let back = chain.backward(1, &tr.controller_side[2]).unwrap();
        assert!(back.sub(&tr.controller_side[1]).unwrap().samples().amax() < 1e-8);
        // controller and plant equations
        let v = tr.v(2);
        let c_ref = StateSpaceModel::scalar_gain(-1.0).simulate(&tr.w(2)).unwrap();
        assert!(v.sub(&c_ref).unwrap().samples().amax() < 1e-9);
    }

    #[test]
    fn causality_of_the_loop() {
        let q = UncertaintyQuartet::new(QuartetKind::Saturation { alpha: 0.2, level: 0.1 }, 0.2, 1, 1).unwrap();
        let net = network(vec![q]);
        let d1 = noise(200, 4);
        let mut s = d1.samples().clone();
        for k in 120..200 {
            s[(0, k)] += 1.0;
        }
        let d2 = SignalTrace::new(0.01, s).unwrap();
        let a = simulate_ncs(&net, 1, &d1, &cfg(200)).unwrap().output_stack().truncate(1.2);
        let b = simulate_ncs(&net, 1, &d2, &cfg(200)).unwrap().output_stack().truncate(1.2);
        assert!(a.sub(&b).unwrap().samples().amax() < 1e-12);
    }

    #[test]
    fn superposition_for_linear_loop() {
        let net = network(vec![scaled_identity(0.1, 0.1, 1, 1).unwrap()]);
        let (a, b) = (noise(300, 5), noise(300, 6));
        let run = |d: &SignalTrace| simulate_ncs(&net, 1, d, &cfg(300)).unwrap().output_stack();
        let lhs = run(&a.scale(2.0).add(&b.scale(-3.0)).unwrap());
        let rhs = run(&a).scale(2.0).add(&run(&b).scale(-3.0)).unwrap();
        assert!(lhs.sub(&rhs).unwrap().l2_norm() <= 1e-8 * rhs.l2_norm());
    }

    #[test]
    fn gain_bounded_by_projection_norm() {
        let net = network(vec![]);
        let sc = SimConfig { horizon: 1000, ..SimConfig::default() };
        let est = estimate_gain(&net, 0, 3, &sc).unwrap();
        // ‖F⁻¹‖∞ with F⁻¹ d = [u1; d2 − y1]
        let proj = margin::parallel_projection(net.plant(), net.controller()).unwrap();
        let mut c = proj.pi.c().clone();
        let mut d = proj.pi.d().clone();
        c.row_mut(1).neg_mut();
        d.row_mut(1).neg_mut();
        d[(1, 1)] += 1.0;
        let finv = StateSpaceModel::new(proj.pi.a().clone(), proj.pi.b().clone(), c, d).unwrap();
        let bound = finv.hinf_norm().unwrap();
        assert!(est.gain <= bound * 1.02, "{} vs {}", est.gain, bound);
        assert!(est.blowup.is_none());
        let bigger = estimate_gain(&net, 0, 5, &sc).unwrap();
        assert!(bigger.gain >= est.gain);
    }

    #[test]
    fn open_loop_integrator_blows_up() {
        let net = NetworkModel::new(integrator(), StateSpaceModel::scalar_gain(0.0), vec![]).unwrap();
        let stats = monte_carlo_robustness(&net, 1, &cfg(2000)).unwrap();
        assert!(stats.blowups.iter().any(|b| b.trial == 0));
    }

    #[test]
    fn algebraic_loop_policy() {
        let p = StateSpaceModel::scalar_gain(1.0);
        let c = StateSpaceModel::scalar_gain(0.99);
        let chain = TwoPortChain::from_quartets(vec![], 1, 1).unwrap();
        let sim = LoopSimulator::new(&p, &c, chain.clone(), &cfg(10)).unwrap();
        assert!(sim.delay_inserted());
        let strict = SimConfig { allow_delay: false, ..cfg(10) };
        assert!(matches!(LoopSimulator::new(&p, &c, chain, &strict), Err(SimError::LoopNotContractive(_))));
    }

    #[test]
    fn derived_seeds_are_distinct() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_abs_diff_eq!(derive_seed(7, 2, 3) as f64, derive_seed(7, 2, 3) as f64);
    }
}

//! Subcommand implementations. Each returns the JSON report and the exit
//! code it maps to.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use ncs_robust::analysis::{
    self, destabilization_certificate, CertificateError, LedgerError, LedgerLock, ResidueLedger, Verdict,
};
use ncs_robust::margin;
use ncs_robust::sim::{self, SimError};

use crate::config::{parse_config, render_config, NetworkConfig, SimSection};
use crate::report;

pub mod exit {
    pub const OK: i32 = 0;
    /// Robust stability not guaranteed, or simulated blowups.
    pub const NOT_GUARANTEED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const LABEL: i32 = 4;
    pub const NOT_APPLICABLE: i32 = 5;
    pub const ANGLE_SHORTFALL: i32 = 6;
}

/// Growth of the replayed ratio table that counts as unbounded.
pub const REPLAY_GROWTH: f64 = 10.0;
/// Largest tolerated discrepancy in `residue verify`.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Value,
    pub code: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Partial report still worth printing.
    pub report: Option<Value>,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), report: None }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub deterministic: bool,
}

pub fn load_config(path: &Path) -> Result<NetworkConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(exit::USAGE, format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::new(exit::USAGE, format!("{}: {e}", path.display())))
}

pub fn cmd_margin(path: &Path, opts: Options) -> Result<Outcome, CliError> {
    let cfg = load_config(path)?;
    let (p, c) = (cfg.network.plant(), cfg.network.controller());
    let stable = margin::internal_stability(p, c);
    let b = if stable { margin::stability_margin(p, c) } else { 0.0 };
    if stable && b == 0.0 {
        return Err(CliError::new(exit::NUMERIC, "projection norm could not be evaluated"));
    }
    let b_opt = margin::max_stability_margin(p).map_err(|e| CliError::new(exit::NUMERIC, e.to_string()))?;
    let payload = json!({
        "b": b,
        "arcsin_b_deg": b.asin().to_degrees(),
        "arcsin_b_rad": b.asin(),
        "b_opt": b_opt,
        "internally_stable": stable,
    });
    Ok(Outcome { report: report::envelope("margin", payload, opts.deterministic), code: exit::OK })
}

pub fn cmd_analyze(path: &Path, opts: Options) -> Result<Outcome, CliError> {
    let cfg = load_config(path)?;
    let rep = analysis::ncs_robust_check(&cfg.network);
    let code = match rep.verdict {
        Verdict::RobustlyStable => exit::OK,
        Verdict::NotGuaranteed | Verdict::LoopUnstable => exit::NOT_GUARANTEED,
    };
    Ok(Outcome { report: report::envelope("analyze", report::stability(&rep), opts.deterministic), code })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidueAction {
    Init { config: PathBuf },
    Add { label: String, r: f64 },
    Mod { label: String, r: f64 },
    Del { label: String },
    Show,
    Verify,
}

fn ledger_error(e: LedgerError) -> CliError {
    let code = match e {
        LedgerError::UnknownLabel(_) | LedgerError::DuplicateLabel(_) | LedgerError::InvalidLabel(_) => exit::LABEL,
        _ => exit::USAGE,
    };
    CliError::new(code, e.to_string())
}

fn ledger_report(ledger: &ResidueLedger, path: &Path) -> Value {
    let residue = ledger.residue();
    let verdict = if ledger.arcsin_b() <= 0.0 {
        Verdict::LoopUnstable
    } else if residue > 0.0 {
        Verdict::RobustlyStable
    } else {
        Verdict::NotGuaranteed
    };
    json!({
        "ledger": path.display().to_string(),
        "arcsin_b_deg": ledger.arcsin_b().to_degrees(),
        "arcsin_b_rad": ledger.arcsin_b(),
        "residue_deg": residue.to_degrees(),
        "residue_rad": residue,
        "events": ledger.events().len(),
        "channels": ledger.channels().iter().map(|(l, r)| json!({ "label": l, "r": r })).collect::<Vec<_>>(),
        "verdict": verdict.as_str(),
    })
}

pub fn cmd_residue(ledger_path: &Path, action: ResidueAction, opts: Options) -> Result<Outcome, CliError> {
    let _lock = LedgerLock::acquire(ledger_path).map_err(ledger_error)?;
    let io = |e: std::io::Error| CliError::new(exit::USAGE, format!("{}: {e}", ledger_path.display()));
    let load = || -> Result<ResidueLedger, CliError> {
        let text = fs::read_to_string(ledger_path).map_err(io)?;
        ResidueLedger::from_journal(&text).map_err(ledger_error)
    };
    let save = |l: &ResidueLedger| l.save(ledger_path).map_err(ledger_error);
    let mut code = exit::OK;
    let payload = match action {
        ResidueAction::Init { config } => {
            let cfg = load_config(&config)?;
            let b = margin::stability_margin(cfg.network.plant(), cfg.network.controller());
            let mut ledger = ResidueLedger::new(b.asin()).map_err(ledger_error)?;
            for ch in cfg.network.channels() {
                ledger.add(&ch.label, ch.r).map_err(ledger_error)?;
            }
            save(&ledger)?;
            ledger_report(&ledger, ledger_path)
        }
        ResidueAction::Add { label, r } => {
            let mut ledger = load()?;
            ledger.add(&label, r).map_err(ledger_error)?;
            save(&ledger)?;
            ledger_report(&ledger, ledger_path)
        }
        ResidueAction::Mod { label, r } => {
            let mut ledger = load()?;
            ledger.modify(&label, r).map_err(ledger_error)?;
            save(&ledger)?;
            ledger_report(&ledger, ledger_path)
        }
        ResidueAction::Del { label } => {
            let mut ledger = load()?;
            ledger.remove(&label).map_err(ledger_error)?;
            save(&ledger)?;
            ledger_report(&ledger, ledger_path)
        }
        ResidueAction::Show => ledger_report(&load()?, ledger_path),
        ResidueAction::Verify => {
            let ledger = load()?;
            let discrepancy = ledger.discrepancy();
            if discrepancy >= VERIFY_TOLERANCE {
                code = exit::NUMERIC;
            }
            let mut v = ledger_report(&ledger, ledger_path);
            v["batch_residue_rad"] = json!(ledger.batch_residue());
            v["discrepancy"] = json!(discrepancy);
            v["consistent"] = json!(discrepancy < VERIFY_TOLERANCE);
            v
        }
    };
    Ok(Outcome { report: report::envelope("residue", payload, opts.deterministic), code })
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub stage: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub traces: Option<PathBuf>,
}

fn sim_error(e: SimError) -> CliError {
    let code = match e {
        SimError::Config(_) | SimError::StageIndex { .. } | SimError::ShapeMismatch { .. } => exit::USAGE,
        _ => exit::NUMERIC,
    };
    CliError::new(code, e.to_string())
}

fn write_traces(cfg: &NetworkConfig, stages: &[usize], dir: &Path) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::new(exit::USAGE, format!("{}: {e}", dir.display())))?;
    let (simulator, seed) = sim::trial_simulator(&cfg.network, 0, &cfg.sim.config).map_err(sim_error)?;
    let (m, p) = cfg.network.partition();
    let mut written = Vec::new();
    for &k in stages {
        let inj = sim::probe_injection(m + p, &cfg.sim.config, seed, k, 0);
        let trace = simulator.run(k, &inj).map_err(sim_error)?;
        let mut files = vec![(format!("k{k}_injection.csv"), trace.injection.clone())];
        for j in 0..trace.plant_side.len() {
            files.push((format!("k{k}_plant_side_{j}.csv"), trace.plant_side[j].clone()));
            files.push((format!("k{k}_controller_side_{j}.csv"), trace.controller_side[j].clone()));
        }
        for (name, t) in files {
            let path = dir.join(&name);
            let file =
                fs::File::create(&path).map_err(|e| CliError::new(exit::USAGE, format!("{}: {e}", path.display())))?;
            t.write_csv(std::io::BufWriter::new(file)).map_err(|e| CliError::new(exit::NUMERIC, e.to_string()))?;
            written.push(name);
        }
    }
    Ok(written)
}

pub fn cmd_simulate(path: &Path, args: SimulateArgs, opts: Options) -> Result<Outcome, CliError> {
    let mut cfg = load_config(path)?;
    if args.trials == Some(0) {
        return Err(CliError::new(exit::USAGE, "--trials must be at least 1"));
    }
    if let Some(seed) = args.seed {
        cfg.sim.config.seed = seed;
    }
    if let Some(spec) = &cfg.replay {
        let rows = sim::replay_certificate(cfg.network.plant(), cfg.network.controller(), spec).map_err(sim_error)?;
        let growth = sim::growth(&rows);
        let code = if growth >= REPLAY_GROWTH { exit::NOT_GUARANTEED } else { exit::OK };
        let mut payload = report::replay(&rows, growth);
        payload["mode"] = json!("replay");
        return Ok(Outcome { report: report::envelope("simulate", payload, opts.deterministic), code });
    }
    let l = cfg.network.channels().len();
    let stages: Vec<usize> = match args.stage {
        Some(k) if k > l => return Err(CliError::new(exit::USAGE, format!("--stage {k} exceeds {l} channels"))),
        Some(k) => vec![k],
        None => (0..=l).collect(),
    };
    let trials = args.trials.unwrap_or(cfg.sim.trials);
    let stats = sim::monte_carlo_robustness_at(&cfg.network, trials, &cfg.sim.config, &stages).map_err(sim_error)?;
    let mut payload = report::monte_carlo(&stats);
    payload["mode"] = json!("monte-carlo");
    if let Some(dir) = &args.traces {
        payload["traces"] = json!(write_traces(&cfg, &stages, dir)?);
    }
    let code = if stats.blowups.is_empty() && stats.failures.is_empty() { exit::OK } else { exit::NOT_GUARANTEED };
    Ok(Outcome { report: report::envelope("simulate", payload, opts.deterministic), code })
}

/// Writes the certificate as a replayable config to `out` when given.
pub fn cmd_certify(path: &Path, out: Option<&Path>, opts: Options) -> Result<Outcome, CliError> {
    let cfg = load_config(path)?;
    let (cert, code) = match destabilization_certificate(&cfg.network) {
        Ok(c) => (c, exit::OK),
        Err(CertificateError::AngleShortfall(c)) => (*c, exit::ANGLE_SHORTFALL),
        Err(CertificateError::NotApplicable { residue }) => {
            let mut e = CliError::new(
                exit::NOT_APPLICABLE,
                format!("residue {:.4}° is positive: robust stability holds", residue.to_degrees()),
            );
            e.report = Some(report::envelope(
                "certify",
                json!({ "applicable": false, "residue_deg": residue.to_degrees() }),
                opts.deterministic,
            ));
            return Err(e);
        }
        Err(CertificateError::LoopUnstable) => {
            return Err(CliError::new(exit::NOT_APPLICABLE, "nominal loop is unstable; no margin to violate"))
        }
        Err(e) => return Err(CliError::new(exit::NUMERIC, e.to_string())),
    };
    let mut payload = report::certificate(&cert);
    payload["applicable"] = json!(true);
    if let Some(out) = out {
        let channels = cfg
            .network
            .channels()
            .iter()
            .zip(cert.quartets())
            .map(|(ch, q)| analysis::Channel { label: ch.label.clone(), r: ch.r, quartet: Some(q.clone()) })
            .collect();
        let network = cfg.network.with_channels(channels).map_err(|e| CliError::new(exit::NUMERIC, e.to_string()))?;
        let spec = cert.replay_spec();
        let sim = SimSection { config: cfg.sim.config.clone(), trials: cfg.sim.trials };
        let text = render_config(&network, &sim, Some(&spec));
        fs::write(out, text).map_err(|e| CliError::new(exit::USAGE, format!("{}: {e}", out.display())))?;
        payload["config"] = json!(out.display().to_string());
    }
    Ok(Outcome { report: report::envelope("certify", payload, opts.deterministic), code })
}

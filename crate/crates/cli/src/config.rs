//! Line-oriented network configs.
//!
//! ```text
//! # integrator loop over two channels
//! [plant]
//! num = [1]
//! den = [1, 0]
//!
//! [controller]
//! D = [[-1]]
//!
//! [channel]
//! label = uplink
//! r = 0.2
//! quartet = channel { kind=saturation, r=0.2, params=[0.15, 1] }
//!
//! [sim]
//! dt = 0.01
//! horizon = 2000
//! seed = 7
//! trials = 100
//! ```
//!
//! `[plant]` and `[controller]` take either `A`, `B`, `C`, `D` matrices or a
//! SISO transfer function `num`, `den`. Every `[channel]` section adds one
//! stage, plant side first. `[replay]` holds a ratio sequence emitted by
//! `ncsr certify`.

use std::fmt;

use nalgebra::DVector;
use ncs_robust::analysis::{AnalysisError, Channel, NetworkModel};
use ncs_robust::lti::{FrequencyGrid, StateSpaceModel};
use ncs_robust::sim::{ReplaySpec, ReplayStep, SimConfig};
use ncs_robust::syntax::{self, Value};
use ncs_robust::twoport::UncertaintyQuartet;

/// Parse failure pinned to a 1-based line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ConfigError {}

/// `[sim]` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub config: SimConfig,
    pub trials: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { config: SimConfig::default(), trials: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub network: NetworkModel,
    pub sim: SimSection,
    pub frequency: Option<FrequencyGrid>,
    pub replay: Option<ReplaySpec>,
}

struct Entry {
    line: usize,
    key: String,
    value: Value,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(err(e.line, format!("unknown key '{}' in [{}]", e.key, self.name)));
            }
        }
        let mut seen: Vec<&str> = Vec::new();
        for e in &self.entries {
            if e.key != "step" && seen.contains(&e.key.as_str()) {
                return Err(err(e.line, format!("key '{}' given twice", e.key)));
            }
            seen.push(&e.key);
        }
        Ok(())
    }

    fn number(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.as_f64().map(Some).ok_or_else(|| err(e.line, format!("'{key}' must be a number"))),
        }
    }

    fn count(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => match e.value.as_f64() {
                Some(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(Some(v as usize)),
                _ => Err(err(e.line, format!("'{key}' must be a non-negative integer"))),
            },
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError { line, msg: msg.into() }
}

fn split_sections(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| err(line, "unterminated section header"))?.trim();
            if !matches!(name, "plant" | "controller" | "channel" | "sim" | "frequency" | "replay") {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let section = sections.last_mut().ok_or_else(|| err(line, "entry outside of a section"))?;
        let pairs = syntax::parse_pairs(body).map_err(|e| err(line, e.to_string()))?;
        if pairs.is_empty() {
            return Err(err(line, "expected key = value"));
        }
        for (key, value) in pairs {
            section.entries.push(Entry { line, key, value });
        }
    }
    Ok(sections)
}

fn model(section: &Section) -> Result<StateSpaceModel, ConfigError> {
    let model_err = |line: usize, e: &dyn fmt::Display| err(line, format!("[{}]: {e}", section.name));
    if section.get("num").is_some() || section.get("den").is_some() {
        section.check_keys(&["num", "den"])?;
        let coeffs = |key: &str| -> Result<Vec<f64>, ConfigError> {
            let e = section.get(key).ok_or_else(|| err(section.line, format!("[{}] needs '{key}'", section.name)))?;
            e.value.as_numbers().ok_or_else(|| err(e.line, format!("'{key}' must be a list of numbers")))
        };
        let (num, den) = (coeffs("num")?, coeffs("den")?);
        return StateSpaceModel::from_transfer_function(&num, &den).map_err(|e| model_err(section.line, &e));
    }
    section.check_keys(&["A", "B", "C", "D"])?;
    for e in &section.entries {
        if e.value.as_rows().is_none() {
            return Err(err(e.line, format!("'{}' must be a matrix [[...], ...]", e.key)));
        }
    }
    let text = section.entries.iter().map(|e| format!("{}={}", e.key, e.value)).collect::<Vec<_>>().join(" ");
    StateSpaceModel::parse(&text).map_err(|e| model_err(section.line, &e))
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_ident() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        _ => Err(err(e.line, format!("'{}' must be true or false", e.key))),
    }
}

fn replay_section(section: &Section, m: usize, p: usize) -> Result<ReplaySpec, ConfigError> {
    section.check_keys(&["stage", "omega", "dt", "duration", "direction", "step"])?;
    let need = |key: &str| err(section.line, format!("[replay] needs '{key}'"));
    let stage = section.count("stage")?.ok_or_else(|| need("stage"))?;
    let omega = section.number("omega")?.unwrap_or(0.0);
    let dt = section.number("dt")?.ok_or_else(|| need("dt"))?;
    let duration = section.number("duration")?.ok_or_else(|| need("duration"))?;
    if dt.is_nan() || dt <= 0.0 || duration.is_nan() || duration < 2.0 * dt {
        return Err(err(section.line, "[replay] needs dt > 0 and duration ≥ 2 dt"));
    }
    let dir_entry = section.get("direction").ok_or_else(|| need("direction"))?;
    let direction = dir_entry
        .value
        .as_numbers()
        .filter(|d| d.len() == m + p)
        .ok_or_else(|| err(dir_entry.line, format!("direction must list {} numbers", m + p)))?;
    let mut steps = Vec::new();
    for e in section.all("step") {
        let bad = |msg: &str| err(e.line, msg.to_string());
        match &e.value {
            Value::Record { name, .. } if name == "step" => {}
            _ => return Err(bad("expected step { beta=..., predicted=..., quartets=[...] }")),
        }
        let beta = e.value.field("beta").and_then(Value::as_f64).ok_or_else(|| bad("step needs numeric beta"))?;
        let predicted = e.value.field("predicted").and_then(Value::as_f64).unwrap_or(f64::NAN);
        let quartets = e
            .value
            .field("quartets")
            .and_then(Value::as_list)
            .ok_or_else(|| bad("step needs quartets=[...]"))?
            .iter()
            .map(|q| UncertaintyQuartet::from_value(q, m, p).map_err(|x| bad(&x.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        steps.push(ReplayStep { beta, predicted, quartets });
    }
    if steps.is_empty() {
        return Err(need("step"));
    }
    Ok(ReplaySpec {
        stage,
        omega,
        dt,
        horizon: (duration / dt).round() as usize,
        direction: DVector::from_vec(direction),
        steps,
    })
}

pub fn parse_config(text: &str) -> Result<NetworkConfig, ConfigError> {
    let sections = split_sections(text)?;
    let single = |name: &str| -> Result<Option<&Section>, ConfigError> {
        let mut it = sections.iter().filter(|s| s.name == name);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(err(dup.line, format!("section [{name}] given twice")));
        }
        Ok(first)
    };
    let plant_sec = single("plant")?.ok_or_else(|| err(1, "missing [plant] section"))?;
    let ctrl_sec = single("controller")?.ok_or_else(|| err(1, "missing [controller] section"))?;
    let plant = model(plant_sec)?;
    let controller = model(ctrl_sec)?;
    let (m, p) = (plant.inputs(), plant.outputs());

    let mut channels = Vec::new();
    let mut channel_lines = Vec::new();
    for (idx, sec) in sections.iter().filter(|s| s.name == "channel").enumerate() {
        sec.check_keys(&["label", "r", "quartet"])?;
        let label = match sec.get("label") {
            Some(e) => e.value.as_ident().ok_or_else(|| err(e.line, "label must be an identifier"))?.to_string(),
            None => format!("ch{}", idx + 1),
        };
        let quartet = match sec.get("quartet") {
            Some(e) => Some(UncertaintyQuartet::from_value(&e.value, m, p).map_err(|x| err(e.line, x.to_string()))?),
            None => None,
        };
        let r = match (sec.number("r")?, &quartet) {
            (Some(r), _) if !(0.0..1.0).contains(&r) => {
                let line = sec.get("r").map_or(sec.line, |e| e.line);
                return Err(err(line, format!("r = {r} outside [0, 1)")));
            }
            (Some(r), _) => r,
            (None, Some(q)) => q.declared_bound(),
            (None, None) => return Err(err(sec.line, "[channel] needs 'r' or 'quartet'")),
        };
        channels.push(Channel { label, r, quartet });
        channel_lines.push(sec.line);
    }
    let network = NetworkModel::new(plant, controller, channels).map_err(|e| {
        let line = match &e {
            AnalysisError::Dimension(_) => ctrl_sec.line,
            AnalysisError::DuplicateLabel(l) | AnalysisError::MissingQuartet(l) => sections
                .iter()
                .filter(|s| s.name == "channel")
                .find(|s| s.get("label").and_then(|e| e.value.as_ident()) == Some(l.as_str()))
                .map_or(1, |s| s.line),
            _ => channel_lines.first().copied().unwrap_or(1),
        };
        err(line, e.to_string())
    })?;

    let mut sim = SimSection::default();
    if let Some(sec) = single("sim")? {
        sec.check_keys(&["dt", "horizon", "seed", "trials", "ensemble", "delay"])?;
        if let Some(dt) = sec.number("dt")? {
            sim.config.dt = dt;
        }
        if let Some(h) = sec.count("horizon")? {
            sim.config.horizon = h;
        }
        if let Some(s) = sec.count("seed")? {
            sim.config.seed = s as u64;
        }
        if let Some(t) = sec.count("trials")? {
            sim.trials = t;
        }
        if let Some(e) = sec.count("ensemble")? {
            sim.config.ensemble = e;
        }
        if let Some(e) = sec.get("delay") {
            sim.config.allow_delay = parse_bool(e)?;
        }
        sim.config.validate().map_err(|e| err(sec.line, e.to_string()))?;
    }

    let frequency = match single("frequency")? {
        None => None,
        Some(sec) => {
            sec.check_keys(&["min", "max", "points"])?;
            let min = sec.number("min")?.unwrap_or(FrequencyGrid::DEFAULT_MIN);
            let max = sec.number("max")?.unwrap_or(FrequencyGrid::DEFAULT_MAX);
            let points = sec.count("points")?.unwrap_or(FrequencyGrid::DEFAULT_POINTS);
            Some(FrequencyGrid::log_spaced(min, max, points).map_err(|e| err(sec.line, e.to_string()))?)
        }
    };

    let replay = match single("replay")? {
        None => None,
        Some(sec) => {
            let spec = replay_section(sec, m, p)?;
            if spec.stage > network.channels().len() {
                return Err(err(
                    sec.line,
                    format!("replay stage {} exceeds {} channels", spec.stage, network.channels().len()),
                ));
            }
            if spec.steps.iter().any(|s| s.quartets.len() != network.channels().len()) {
                return Err(err(sec.line, "every replay step needs one quartet per channel"));
            }
            Some(spec)
        }
    };

    Ok(NetworkConfig { network, sim, frequency, replay })
}

/// Renders a config that `parse_config` reads back to the same network.
pub fn render_config(network: &NetworkModel, sim: &SimSection, replay: Option<&ReplaySpec>) -> String {
    let mut out = String::new();
    let block = |name: &str, m: &StateSpaceModel| {
        let mut s = format!("[{name}]\n");
        for (key, mat) in [("A", m.a()), ("B", m.b()), ("C", m.c()), ("D", m.d())] {
            if mat.is_empty() && key != "D" {
                continue;
            }
            let rows = (0..mat.nrows())
                .map(|i| {
                    format!("[{}]", (0..mat.ncols()).map(|j| mat[(i, j)].to_string()).collect::<Vec<_>>().join(", "))
                })
                .collect::<Vec<_>>()
                .join(", ");
            s.push_str(&format!("{key} = [{rows}]\n"));
        }
        s
    };
    out.push_str(&block("plant", network.plant()));
    out.push('\n');
    out.push_str(&block("controller", network.controller()));
    for ch in network.channels() {
        out.push_str(&format!("\n[channel]\nlabel = {}\nr = {}\n", ch.label, ch.r));
        if let Some(q) = &ch.quartet {
            out.push_str(&format!("quartet = {}\n", q.to_value()));
        }
    }
    let c = &sim.config;
    out.push_str(&format!(
        "\n[sim]\ndt = {}\nhorizon = {}\nseed = {}\ntrials = {}\nensemble = {}\ndelay = {}\n",
        c.dt, c.horizon, c.seed, sim.trials, c.ensemble, c.allow_delay
    ));
    if let Some(r) = replay {
        let dir = r.direction.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        out.push_str(&format!(
            "\n[replay]\nstage = {}\nomega = {}\ndt = {}\nduration = {}\ndirection = [{dir}]\n",
            r.stage,
            r.omega,
            r.dt,
            r.dt * r.horizon as f64
        ));
        for s in &r.steps {
            let step = Value::Record {
                name: "step".into(),
                fields: vec![
                    ("beta".into(), Value::Number(s.beta)),
                    ("predicted".into(), Value::Number(s.predicted)),
                    ("quartets".into(), Value::List(s.quartets.iter().map(|q| q.to_value()).collect())),
                ],
            };
            out.push_str(&format!("step = {step}\n"));
        }
    }
    out
}

//! JSON report assembly.

use serde_json::{json, Map, Value};

use ncs_robust::analysis::{Certificate, StabilityReport};
use ncs_robust::sim::{MonteCarloStats, ReplayRow};

pub const SCHEMA_VERSION: u32 = 1;

/// Wraps a command payload with the schema version and, unless the run is
/// deterministic, a generation timestamp.
pub fn envelope(command: &str, payload: Value, deterministic: bool) -> Value {
    let mut root = Map::new();
    root.insert("schema_version".into(), json!(SCHEMA_VERSION));
    root.insert("command".into(), json!(command));
    if !deterministic {
        let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        root.insert("generated_unix".into(), json!(now));
    }
    if let Value::Object(fields) = payload {
        root.extend(fields);
    }
    Value::Object(root)
}

pub fn angle(rad: f64) -> Value {
    json!({ "deg": rad.to_degrees(), "rad": rad })
}

pub fn stability(rep: &StabilityReport) -> Value {
    json!({
        "b": rep.b,
        "arcsin_b_deg": rep.arcsin_b.to_degrees(),
        "arcsin_b_rad": rep.arcsin_b,
        "internally_stable": rep.internally_stable,
        "channels": rep.channels.iter().map(|c| json!({
            "label": c.label,
            "r": c.r,
            "arcsin_r_deg": c.arcsin_r.to_degrees(),
            "arcsin_r_rad": c.arcsin_r,
        })).collect::<Vec<_>>(),
        "residue_deg": rep.residue.to_degrees(),
        "residue_rad": rep.residue,
        "verdict": rep.verdict.as_str(),
        "splits": rep.splits.iter().map(|s| json!({
            "k": s.k,
            "r_p": s.r_p,
            "r_c": s.r_c,
            "slack_deg": s.slack.to_degrees(),
            "verdict": s.verdict.as_str(),
        })).collect::<Vec<_>>(),
        "advisory": rep.advisory,
        "diagnostics": rep.diagnostics,
    })
}

pub fn monte_carlo(stats: &MonteCarloStats) -> Value {
    json!({
        "trials": stats.trials,
        "stages": stats.stages.iter().enumerate().map(|(i, &k)| json!({
            "k": k,
            "max_gain": stats.max_gain[i],
            "max_doubling_change": stats.max_doubling_change[i],
        })).collect::<Vec<_>>(),
        "blowups": stats.blowups.iter().map(|b| json!({
            "trial": b.trial,
            "stage": b.stage,
            "reason": b.reason.as_str(),
        })).collect::<Vec<_>>(),
        "failures": stats.failures.iter().map(|f| json!({ "trial": f.trial, "message": f.message })).collect::<Vec<_>>(),
        "delay_inserted": stats.delay_inserted,
        "note": "finite-horizon evidence; a run is flagged when its gain changes by more than 5% on doubling the horizon",
    })
}

pub fn replay(rows: &[ReplayRow], growth: f64) -> Value {
    json!({
        "ratio_table": rows.iter().enumerate().map(|(j, r)| json!({
            "j": j + 1,
            "beta": r.beta,
            "predicted": r.predicted,
            "observed": r.observed,
        })).collect::<Vec<_>>(),
        "growth": growth,
    })
}

pub fn certificate(cert: &Certificate) -> Value {
    json!({
        "omega_star": cert.omega_star,
        "theta_star_deg": cert.theta_star.to_degrees(),
        "omega": cert.omega,
        "theta_deg": cert.theta.to_degrees(),
        "final_angle_deg": cert.final_angle.to_degrees(),
        "near_violation": cert.near_violation,
        "direction": cert.direction.iter().copied().collect::<Vec<_>>(),
        "quartets": cert.quartets().iter().map(|q| q.to_value().to_string()).collect::<Vec<_>>(),
        "ratio_table": cert.steps.iter().map(|s| json!({
            "j": s.j,
            "alpha": s.alpha,
            "beta": s.beta,
            "gap_deg": s.gap.to_degrees(),
            "predicted": s.predicted_ratio,
        })).collect::<Vec<_>>(),
        "growth": cert.growth(),
    })
}

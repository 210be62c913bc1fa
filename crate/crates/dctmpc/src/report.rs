//! File emission for simulation runs: trajectory and estimator CSV logs,
//! plot-ready prediction data, and a summary document.
//!
//! Numeric fields are printed with 17 significant digits, which round-trips
//! f64 exactly; every format carries a schema tag line or field.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{PredictionSnapshot, Scenario, SimLog};
use crate::tube::FeasibilityPath;

pub const TRAJECTORIES_SCHEMA: &str = "trajectories/1";
pub const ESTIMATOR_SCHEMA: &str = "estimator/1";
pub const PREDICTION_SCHEMA: &str = "prediction/1";
pub const SUMMARY_SCHEMA: &str = "summary/1";

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn path_tag(p: FeasibilityPath) -> &'static str {
    match p {
        FeasibilityPath::Initial => "initial",
        FeasibilityPath::Normal => "normal",
        FeasibilityPath::Fallback => "fallback",
        FeasibilityPath::EmergencyHold => "emergency",
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn trajectories_csv(log: &SimLog) -> String {
    let mut out = String::new();
    out.push_str(&format!("# schema={TRAJECTORIES_SCHEMA}\n"));
    out.push_str("t,X,S,P,V,u,alpha1,alpha2,alpha3,alpha4,beta,cost,iters,path\n");
    for r in &log.records {
        let x = r.state;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt(r.t),
            fmt(x.biomass),
            fmt(x.substrate),
            fmt(x.product),
            fmt(x.volume),
            fmt(r.u_applied),
            fmt(r.alpha[0]),
            fmt(r.alpha[1]),
            fmt(r.alpha[2]),
            fmt(r.alpha[3]),
            fmt(r.beta),
            fmt(r.cost),
            r.iterations,
            path_tag(r.path),
        ));
    }
    // closing state record (no control applied at the final instant)
    let x = log.final_state;
    let t = match (log.records.first(), log.records.last(), log.records.len()) {
        (Some(first), Some(last), n) if n >= 2 => last.t + (last.t - first.t) / (n - 1) as f64,
        (Some(first), _, _) => first.t + 1.0,
        _ => 0.0,
    };
    out.push_str(&format!(
        "{},{},{},{},{},NaN,NaN,NaN,NaN,NaN,NaN,NaN,0,final\n",
        fmt(t),
        fmt(x.biomass),
        fmt(x.substrate),
        fmt(x.product),
        fmt(x.volume),
    ));
    out
}

pub fn estimator_csv(log: &SimLog) -> String {
    let mut out = String::new();
    out.push_str(&format!("# schema={ESTIMATOR_SCHEMA}\n"));
    out.push_str("n,h1,h2,h3,h4,theta1,theta2,innovation\n");
    for (n, r) in log.records.iter().enumerate() {
        if let Some(e) = &r.estimator {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                n,
                fmt(e.h[0]),
                fmt(e.h[1]),
                fmt(e.h[2]),
                fmt(e.h[3]),
                fmt(e.theta_hat[0]),
                fmt(e.theta_hat[1]),
                fmt(e.innovation_norm),
            ));
        }
    }
    out
}

pub fn prediction_csv(snapshot: &PredictionSnapshot) -> String {
    let mut out = String::new();
    out.push_str(&format!("# schema={PREDICTION_SCHEMA}\n"));
    out.push_str("k,X,S,P,V,u,X_lo,S_lo,P_lo,V_lo,X_hi,S_hi,P_hi,V_hi\n");
    for k in 0..snapshot.states.len() {
        let x = snapshot.states[k].as_vector();
        let u = snapshot.controls.get(k).cloned().unwrap_or(f64::NAN);
        let lo = &snapshot.lower[k];
        let hi = &snapshot.upper[k];
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            k,
            fmt(x[0]),
            fmt(x[1]),
            fmt(x[2]),
            fmt(x[3]),
            fmt(u),
            fmt(lo[0]),
            fmt(lo[1]),
            fmt(lo[2]),
            fmt(lo[3]),
            fmt(hi[0]),
            fmt(hi[1]),
            fmt(hi[2]),
            fmt(hi[3]),
        ));
    }
    out
}

pub fn summary_json(log: &SimLog, sc: Option<&Scenario>) -> Result<String> {
    let mut doc = serde_json::json!({
        "schema": SUMMARY_SCHEMA,
        "scenario": log.scenario,
        "mode": log.mode,
        "seed": log.seed,
        "steps": log.records.len(),
        "final_state": log.final_state,
        "metrics": log.metrics,
    });
    if let Some(sc) = sc {
        doc["config"] = serde_json::to_value(sc).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
}

/// Write the full report set for one run into a directory.
pub fn emit_report(log: &SimLog, sc: Option<&Scenario>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_file(&out_dir.join("trajectories.csv"), &trajectories_csv(log))?;
    write_file(&out_dir.join("estimator.csv"), &estimator_csv(log))?;
    write_file(&out_dir.join("summary.json"), &summary_json(log, sc)?)?;
    if let Some(snapshot) = &log.prediction_t0 {
        write_file(&out_dir.join("prediction_t0.csv"), &prediction_csv(snapshot))?;
    }
    Ok(())
}

/// Parse a CSV emitted by this module back into numeric rows (schema and
/// header lines skipped; non-numeric columns preserved as NaN).
pub fn parse_csv_numeric(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|line| {
            line.split(',')
                .map(|f| f.parse::<f64>().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

/// Minimal structural validator for the shipped summary schema document:
/// supports `type`, `required`, and `properties` (the subset the schema
/// uses). Returns the first mismatch found.
pub fn validate_against_schema(value: &serde_json::Value, schema: &serde_json::Value) -> std::result::Result<(), String> {
    fn type_matches(value: &serde_json::Value, ty: &str) -> bool {
        match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_i64() || value.is_u64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        }
    }
    if let Some(ty) = schema.get("type") {
        let ok = match ty {
            serde_json::Value::String(t) => type_matches(value, t),
            serde_json::Value::Array(ts) => ts
                .iter()
                .filter_map(|t| t.as_str())
                .any(|t| type_matches(value, t)),
            _ => return Err("schema 'type' must be string or array".into()),
        };
        if !ok {
            return Err(format!("value {value} does not match type {ty}"));
        }
    }
    if let Some(required) = schema.get("required").and_then(|r| r.as_array()) {
        for key in required.iter().filter_map(|k| k.as_str()) {
            if value.get(key).is_none() {
                return Err(format!("missing required field {key:?}"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
        for (key, sub) in props {
            if let Some(v) = value.get(key) {
                validate_against_schema(v, sub).map_err(|e| format!("{key}: {e}"))?;
            }
        }
    }
    if let Some(items) = schema.get("items") {
        if let Some(arr) = value.as_array() {
            for (i, v) in arr.iter().enumerate() {
                validate_against_schema(v, items).map_err(|e| format!("[{i}]: {e}"))?;
            }
        }
    }
    Ok(())
}

//! wasm-bindgen entry points for `www/index.html`.
//!
//! Every export takes the same `key = value` text the CLI reads and returns
//! a JSON string, so the page needs no bindings beyond strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use grflow::experiment::{self, ExperimentConfig, ExperimentError};

// keeps an interactive call under a second or so
const MAX_N: usize = 12;

fn config(text: &str) -> Result<ExperimentConfig, String> {
    let cfg = ExperimentConfig::parse(text).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn lattice_config(text: &str) -> Result<ExperimentConfig, String> {
    let cfg = config(text)?;
    if cfg.n > MAX_N {
        return Err(format!("n = {} is too large for the browser demo (at most {MAX_N})", cfg.n));
    }
    Ok(cfg)
}

fn err(e: ExperimentError) -> String {
    e.to_string()
}

/// Lowest eigenpair of the Schrödinger operator for the configured data.
pub fn eigen_json(text: &str) -> Result<String, String> {
    let cfg = lattice_config(text)?;
    let rep = experiment::cmd_eigen(&cfg).map_err(err)?;
    let w = rep.w.values();
    let n = cfg.n;
    // the z = 0 slice of w, row-major, for the heat map
    let slice: Vec<f64> = (0..n * n).map(|p| w[p * n]).collect();
    Ok(json!({ "report": rep, "n": n, "w_slice": slice }).to_string())
}

/// Newton solve for a stationary left-invariant metric.
pub fn homogeneous_json(text: &str) -> Result<String, String> {
    let cfg = config(text)?;
    let rep = experiment::cmd_homogeneous(&cfg).map_err(err)?;
    Ok(json!({ "report": rep, "passed": experiment::all_passed(&rep.checks) }).to_string())
}

/// A short flow; returns every sample.
pub fn flow_json(text: &str) -> Result<String, String> {
    let cfg = lattice_config(text)?;
    let traj = experiment::cmd_flow(&cfg).map_err(err)?;
    let samples: Vec<Value> = traj.samples.iter().map(|s| serde_json::to_value(s).unwrap_or(Value::Null)).collect();
    Ok(json!({ "steps": traj.steps, "stop": traj.stop, "samples": samples }).to_string())
}

#[wasm_bindgen]
pub fn eigen(text: &str) -> Result<String, JsError> {
    eigen_json(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn homogeneous(text: &str) -> Result<String, JsError> {
    homogeneous_json(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn flow(text: &str) -> Result<String, JsError> {
    flow_json(text).map_err(|e| JsError::new(&e))
}

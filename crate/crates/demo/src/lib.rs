//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each operation has a plain Rust form returning JSON (used by the native
//! tests) and a `#[wasm_bindgen]` wrapper that turns errors into JS errors.

use serde_json::json;
use wasm_bindgen::prelude::*;

use sdrl_core::analysis::{interpolation_sweep, transport_plan_experiment, PlanExperimentSpec};
use sdrl_core::divergence::{energy_distance, mmd_squared, wasserstein_1d, CostSpec};
use sdrl_core::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use sdrl_core::ParticleSet;

/// Largest sample the page may request; keeps a solve interactive.
pub const MAX_POINTS: usize = 96;

fn numbers(text: &str, what: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("{what}: `{t}` is not a number")))
        .collect()
}

fn particles(text: &str, what: &str) -> Result<ParticleSet, String> {
    ParticleSet::uniform(numbers(text, what)?).map_err(|e| format!("{what}: {e}"))
}

/// Plans between two Gaussian samples, one per ε: `{plans: [{epsilon, entropy, plan_kl, n, matrix}]}`.
pub fn transport_plans_json(eps_list: &str, n_points: usize, seed: u64) -> Result<String, String> {
    if n_points == 0 || n_points > MAX_POINTS {
        return Err(format!("n_points must lie in 1..={MAX_POINTS}"));
    }
    let mut spec = PlanExperimentSpec::new(n_points, numbers(eps_list, "eps")?, seed);
    spec.max_iterations = 5000;
    spec.tolerance = 1e-9;
    let exp = transport_plan_experiment(&spec).map_err(|e| e.to_string())?;
    let plans: Vec<_> = exp
        .plans
        .iter()
        .zip(&exp.summaries)
        .map(|(p, s)| {
            json!({
                "epsilon": s.epsilon,
                "entropy": s.entropy,
                "plan_kl": s.plan_kl,
                "n": p.n_rows(),
                "matrix": p.matrix(),
            })
        })
        .collect();
    Ok(json!({ "plans": plans }).to_string())
}

/// Sinkhorn divergence over a log grid of ε with both limit values: `{rows, two_w, mmd}`.
pub fn interpolation_json(x: &str, y: &str, alpha: f64) -> Result<String, String> {
    let (x, y) = (particles(x, "x")?, particles(y, "y")?);
    let grid: Vec<f64> = (0..17).map(|k| 10f64.powf(-2.0 + 0.5 * k as f64)).collect();
    let cfg = SinkhornConfig::new(1.0, 2000).with_tolerance(1e-10);
    let report = interpolation_sweep(&x, &y, &CostSpec::power(alpha), &grid, &cfg).map_err(|e| e.to_string())?;
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| json!({ "epsilon": r.epsilon, "divergence": r.divergence, "plan_kl": r.plan_kl }))
        .collect();
    let first = &report.rows[0];
    Ok(json!({ "rows": rows, "two_w": first.two_w, "mmd": first.mmd }).to_string())
}

/// One divergence value; `kind` is `sinkhorn`, `mmd`, `energy` or `w1`.
pub fn divergence_value(kind: &str, x: &str, y: &str, eps: f64, alpha: f64) -> Result<f64, String> {
    let (x, y) = (particles(x, "x")?, particles(y, "y")?);
    let cost = CostSpec::power(alpha);
    let v = match kind {
        "sinkhorn" => sinkhorn_divergence(&x, &y, &cost, &SinkhornConfig::new(eps, 1000).with_tolerance(1e-10)),
        "mmd" => mmd_squared(&x, &y, &cost),
        "energy" => Ok(energy_distance(&x, &y)),
        "w1" => wasserstein_1d(&x, &y, 1.0),
        other => return Err(format!("unknown divergence `{other}`")),
    };
    v.map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn transport_plans(eps_list: &str, n_points: u32, seed: u32) -> Result<String, JsError> {
    transport_plans_json(eps_list, n_points as usize, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn interpolation(x: &str, y: &str, alpha: f64) -> Result<String, JsError> {
    interpolation_json(x, y, alpha).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn divergence(kind: &str, x: &str, y: &str, eps: f64, alpha: f64) -> Result<f64, JsError> {
    divergence_value(kind, x, y, eps, alpha).map_err(|e| JsError::new(&e))
}

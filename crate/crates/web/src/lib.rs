//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes a JSON system config and returns a JSON document; the
//! page owns the plotting. The `*_json` functions are plain Rust so they can be
//! tested natively. Seeds cross the boundary as `u32` so JavaScript can pass
//! plain numbers.

use mfsocial::cli::{run_comparison, run_convergence};
use mfsocial::cost::Stat;
use mfsocial::simulate::{SimOptions, SolvedSystem};
use mfsocial::{Error, SystemSpec};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Upper bound on plotted points per series.
const MAX_POINTS: usize = 200;

fn stride(steps: usize) -> usize {
    steps.div_ceil(MAX_POINTS).max(1)
}

fn nodes(steps: usize) -> Vec<usize> {
    let s = stride(steps);
    let mut out: Vec<usize> = (0..=steps).step_by(s).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

fn stat(s: Stat) -> Value {
    json!({ "mean": s.mean, "std_error": s.std_error })
}

fn solve(config: &str) -> Result<SolvedSystem, Error> {
    SolvedSystem::new(SystemSpec::from_json(config)?)
}

/// `P_q`, `F_q` and `Fbar_q` along the grid (first entry of each matrix, plus
/// the full first row of `Fbar_q`).
pub fn riccati_json(config: &str) -> Result<Value, Error> {
    let sys = solve(config)?;
    let grid = nodes(sys.spec.steps);
    let clusters: Vec<Value> = (0..sys.spec.k())
        .map(|q| {
            let p: Vec<f64> = grid.iter().map(|&t| sys.riccati.p[q][t][(0, 0)]).collect();
            let own: Vec<f64> = grid.iter().map(|&t| sys.gains.own[q][t][(0, 0)]).collect();
            let mean: Vec<Vec<f64>> = grid
                .iter()
                .map(|&t| sys.gains.mean[q][t].row(0).iter().copied().collect())
                .collect();
            json!({
                "label": sys.spec.clusters[q].label,
                "count": sys.spec.clusters[q].count,
                "p": p,
                "own_gain": own,
                "mean_gain": mean,
            })
        })
        .collect();
    Ok(json!({
        "times": grid.iter().map(|&t| sys.spec.time(t)).collect::<Vec<_>>(),
        "clusters": clusters,
    }))
}

/// Both controllers on common noise: path-0 mean fields, the estimates of
/// every cluster, mean-square estimation errors and the cost summary.
pub fn compare_json(config: &str, paths: usize, seed: u64) -> Result<Value, Error> {
    let sys = solve(config)?;
    let cmp = run_comparison(&sys, paths, seed, SimOptions::default())?;
    let (k, n) = (sys.spec.k(), sys.spec.state_dim);
    let grid = nodes(sys.spec.steps);
    let first = |xs: &[f64], q: usize| xs[q * n];
    let series = |b: &mfsocial::simulate::TrajectoryBundle| -> Vec<Vec<f64>> {
        (0..k)
            .map(|q| grid.iter().map(|&t| first(b.global_mean(0, t), q)).collect())
            .collect()
    };
    let estimates: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|q| {
            (0..k)
                .map(|p| grid.iter().map(|&t| first(cmp.run.estimator.estimate(0, t, q), p)).collect())
                .collect()
        })
        .collect();
    let errors: Vec<Vec<f64>> = cmp
        .errors
        .check
        .iter()
        .map(|e| grid.iter().map(|&t| e[t]).collect())
        .collect();
    let agents = sys.spec.total_agents();
    Ok(json!({
        "times": grid.iter().map(|&t| sys.spec.time(t)).collect::<Vec<_>>(),
        "agents": agents,
        "centralized_means": series(&cmp.run.centralized),
        "distributed_means": series(&cmp.run.distributed),
        "estimates": estimates,
        "errors": errors,
        "sup_error": cmp.errors.sup_check,
        "centralized_cost": stat(cmp.centralized.j_soc),
        "distributed_cost": stat(cmp.distributed.j_soc),
        "gap_per_agent": stat(cmp.gap_per_agent(agents)),
        "value": cmp.value.corrected,
    }))
}

/// Estimation error and cost gap against the smallest cluster size, with the
/// fitted log-log slopes.
pub fn sweep_json(config: &str, scales: &[usize], paths: usize, seed: u64) -> Result<Value, Error> {
    let spec = SystemSpec::from_json(config)?;
    let study = run_convergence(&spec, scales, paths, seed, None)?;
    let rows: Vec<Value> = study
        .rows
        .iter()
        .map(|r| {
            json!({
                "scale": r.scale,
                "c1": r.c1,
                "n": r.n,
                "sup_error": stat(r.sup_error),
                "gap_per_agent": stat(r.gap_per_agent),
            })
        })
        .collect();
    Ok(json!({
        "rows": rows,
        "error_slope": study.error_fit.slope,
        "gap_slope": study.gap_fit.map(|f| f.slope),
    }))
}

fn export(result: Result<Value, Error>) -> Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn riccati(config: &str) -> Result<String, JsError> {
    export(riccati_json(config))
}

#[wasm_bindgen]
pub fn compare(config: &str, paths: usize, seed: u32) -> Result<String, JsError> {
    export(compare_json(config, paths, seed.into()))
}

#[wasm_bindgen]
pub fn sweep(config: &str, scales: Vec<usize>, paths: usize, seed: u32) -> Result<String, JsError> {
    export(sweep_json(config, &scales, paths, seed.into()))
}

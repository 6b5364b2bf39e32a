//! Subcommand implementations. Each writes CSV tables and a manifest into
//! the output directory and returns a human-readable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cost::{social_cost, value_function, CostReport, Stat};
use crate::error::{Error, Result};
use crate::estimator::{estimation_errors, EstimationErrors, EstimatorTrace};
use crate::model::SystemSpec;
use crate::riccati::riccati_residual;
use crate::simulate::{
    draw_noise, simulate_centralized, simulate_coupled, simulate_distributed, Regime, SimOptions,
    SolvedSystem, TrajectoryBundle,
};

use super::experiments::{run_comparison, run_convergence, run_oracle, ConvergenceStudy, OracleTolerances};
use super::output::{num, Manifest, Table};

/// Options shared by the experiment commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: u64,
    pub paths: usize,
    pub out: PathBuf,
    pub dump_trajectories: bool,
    pub steps_override: Option<usize>,
    /// Worker threads; never recorded in any output.
    pub workers: Option<usize>,
}

impl RunOptions {
    pub fn new(config: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            seed: 0,
            paths: 1000,
            out: out.into(),
            dump_trajectories: false,
            steps_override: None,
            workers: None,
        }
    }

    fn sim_options(&self) -> SimOptions {
        SimOptions {
            retain_agents: self.dump_trajectories,
            workers: self.workers,
        }
    }
}

/// Result of a command: what it wrote and whether every check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
    pub pass: bool,
}

/// Reads and validates a config, applying a step override.
pub fn load_spec(config: &Path, steps_override: Option<usize>) -> Result<(SystemSpec, String)> {
    let text = fs::read_to_string(config)?;
    let spec = SystemSpec::from_json(&text)?;
    let spec = match steps_override {
        Some(steps) => spec.with_steps(steps)?,
        None => spec,
    };
    Ok((spec, text))
}

fn finish(mut manifest: Manifest, tables: &[Table], out: &Path, summary: String, pass: bool) -> Result<Outcome> {
    let mut files = Vec::with_capacity(tables.len() + 1);
    for t in tables {
        files.push(t.write(out)?);
        manifest.outputs.push(format!("{}.csv", t.name));
    }
    files.push(manifest.write(out)?);
    Ok(Outcome {
        summary,
        files,
        pass,
    })
}

pub fn cmd_validate(config: &Path) -> Result<Outcome> {
    let (spec, _) = load_spec(config, None)?;
    let d = crate::model::derive_matrices(&spec);
    let mut s = String::new();
    let _ = writeln!(s, "config ok: {}", config.display());
    let _ = writeln!(
        s,
        "K = {}, N = {}, n = {}, m = {}, d_w = {}, T = {}, steps = {}",
        spec.k(),
        spec.total_agents(),
        spec.state_dim,
        spec.control_dim,
        spec.noise_dim,
        spec.horizon,
        spec.steps
    );
    for (q, c) in spec.clusters.iter().enumerate() {
        let neighbors = spec.topology.neighbor_set(q)?;
        let _ = writeln!(
            s,
            "cluster {q} ({}): N_q = {}, pi_q = {:.6}, observes {:?}",
            c.label,
            c.count,
            d.pi_k[(q * spec.state_dim, q * spec.state_dim)],
            neighbors
        );
    }
    let _ = writeln!(
        s,
        "max |Qbar^K| = {:.6e}, max |Hbar^K| = {:.6e}, max |D^K| = {:.6e}",
        d.qbar_k.amax(),
        d.hbar_k.amax(),
        d.d_k.amax()
    );
    for w in spec.warnings() {
        let _ = writeln!(s, "warning: {w}");
    }
    Ok(Outcome {
        summary: s,
        files: Vec::new(),
        pass: true,
    })
}

pub fn cmd_riccati(opts: &RunOptions) -> Result<Outcome> {
    let (spec, text) = load_spec(&opts.config, opts.steps_override)?;
    let sys = SolvedSystem::new(spec)?;
    let (n, m, k) = (sys.spec.state_dim, sys.spec.control_dim, sys.spec.k());
    let times = &sys.riccati.times;

    let mut p = Table::new("riccati_p", &["cluster", "step", "t", "row", "col", "value"]);
    let mut kk = Table::new("riccati_k", &["step", "t", "row", "col", "value"]);
    let mut gains = Table::new("gains", &["cluster", "step", "t", "family", "row", "col", "value"]);
    for (step, &t) in times.iter().enumerate() {
        for q in 0..k {
            let pq = &sys.riccati.p[q][step];
            for r in 0..n {
                for c in 0..n {
                    p.push(vec![q.to_string(), step.to_string(), num(t), r.to_string(), c.to_string(), num(pq[(r, c)])]);
                }
            }
            for (family, mat) in [("F", &sys.gains.own[q][step]), ("Fbar", &sys.gains.mean[q][step])] {
                for r in 0..m {
                    for c in 0..mat.ncols() {
                        gains.push(vec![
                            q.to_string(),
                            step.to_string(),
                            num(t),
                            family.to_string(),
                            r.to_string(),
                            c.to_string(),
                            num(mat[(r, c)]),
                        ]);
                    }
                }
            }
        }
        let km = &sys.riccati.kk[step];
        for r in 0..km.nrows() {
            for c in 0..km.ncols() {
                kk.push(vec![step.to_string(), num(t), r.to_string(), c.to_string(), num(km[(r, c)])]);
            }
        }
    }
    let residual = riccati_residual(&sys.riccati, &sys.spec, &sys.derived);
    let value = value_function(&sys.spec, &sys.derived, &sys.riccati)?;
    let mut summary = Table::new("riccati_summary", &["quantity", "value"]);
    for (name, v) in [
        ("residual_p", residual.p),
        ("residual_k", residual.k),
        ("max_presym_asymmetry", sys.riccati.max_presym_asymmetry),
        ("value_stated", value.stated),
        ("value_noise_term", value.noise_term),
        ("value_corrected", value.corrected),
    ] {
        summary.push(vec![name.to_string(), num(v)]);
    }
    let text_summary = format!(
        "solved {} clusters on {} steps; residual P {:.3e}, K {:.3e}; value {:.10} (noise term {:.10})\n",
        k, sys.spec.steps, residual.p, residual.k, value.corrected, value.noise_term
    );
    let manifest = Manifest::new("riccati", &text, opts.seed, 0, sys.spec.steps);
    finish(manifest, &[p, kk, gains, summary], &opts.out, text_summary, true)
}

fn cost_rows(table: &mut Table, regime: &str, report: &CostReport, agents: usize) {
    for (name, stat) in [
        ("J_soc", report.j_soc),
        ("J_soc_per_agent", report.j_soc.scaled(1.0 / agents as f64)),
        ("J1", report.j1),
        ("J2", report.j2),
    ] {
        table.push(vec![regime.to_string(), name.to_string(), num(stat.mean), num(stat.std_error)]);
    }
}

fn cost_table() -> Table {
    Table::new("cost_report", &["regime", "statistic", "value", "std_error"])
}

fn trajectory_table(spec: &SystemSpec, bundles: &[&TrajectoryBundle]) -> Result<Table> {
    let (n, m) = (spec.state_dim, spec.control_dim);
    let mut header = vec!["regime", "path", "agent", "cluster", "step", "t"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..n).map(|c| format!("x{c}")));
    header.extend((0..m).map(|c| format!("u{c}")));
    let mut table = Table {
        name: "trajectories".into(),
        header,
        rows: Vec::new(),
    };
    for b in bundles {
        if !b.has_agents() {
            return Err(Error::MissingTrajectories);
        }
        for path in 0..b.paths.len() {
            for agent in 0..b.agents {
                let q = spec.cluster_of(agent).expect("in range");
                for step in 0..=b.steps {
                    let mut row = vec![
                        b.regime.name().to_string(),
                        path.to_string(),
                        agent.to_string(),
                        q.to_string(),
                        step.to_string(),
                        num(spec.time(step)),
                    ];
                    row.extend(b.state(path, step, agent).expect("retained").iter().map(|&v| num(v)));
                    match step < b.steps {
                        true => row.extend(b.control(path, step, agent).expect("retained").iter().map(|&v| num(v))),
                        false => row.extend((0..m).map(|_| String::new())),
                    }
                    table.push(row);
                }
            }
        }
    }
    Ok(table)
}

fn error_summary_table(errors: &EstimationErrors) -> Table {
    let mut t = Table::new(
        "estimation_summary",
        &["cluster", "step", "t", "mean_square_check", "mean_square_hat"],
    );
    for (q, series) in errors.check.iter().enumerate() {
        for (step, &e) in series.iter().enumerate() {
            let hat = errors.hat.as_ref().map_or(String::new(), |h| num(h[q][step]));
            t.push(vec![q.to_string(), step.to_string(), num(errors.times[step]), num(e), hat]);
        }
    }
    t
}

fn error_path_table(
    distributed: &TrajectoryBundle,
    trace: &EstimatorTrace,
    centralized: Option<&TrajectoryBundle>,
) -> Table {
    let mut t = Table::new(
        "estimation_errors",
        &["path", "cluster", "step", "t", "err_check_sq", "err_hat_sq"],
    );
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for path in 0..distributed.paths.len() {
        for q in 0..trace.k {
            for step in 0..=distributed.steps {
                let est = trace.estimate(path, step, q);
                let check = sq(distributed.global_mean(path, step), est);
                let hat = centralized.map_or(String::new(), |c| num(sq(c.global_mean(path, step), est)));
                t.push(vec![
                    path.to_string(),
                    q.to_string(),
                    step.to_string(),
                    num(step as f64 * distributed.step_size),
                    num(check),
                    hat,
                ]);
            }
        }
    }
    t
}

/// Which controllers `simulate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulateRegime {
    Centralized,
    Distributed,
    Both,
}

pub fn cmd_simulate(opts: &RunOptions, regime: SimulateRegime) -> Result<Outcome> {
    let (spec, text) = load_spec(&opts.config, opts.steps_override)?;
    let sys = SolvedSystem::new(spec)?;
    let noise = draw_noise(&sys.spec, opts.paths, opts.seed)?;
    let agents = sys.spec.total_agents();
    let mut tables = Vec::new();
    let mut costs = cost_table();
    let mut summary = String::new();
    let (cen, dis) = match regime {
        SimulateRegime::Centralized => (Some(simulate_centralized(&sys, &noise, opts.sim_options())?), None),
        SimulateRegime::Distributed => (None, Some(simulate_distributed(&sys, &noise, opts.sim_options())?)),
        SimulateRegime::Both => {
            let run = simulate_coupled(&sys, &noise, opts.sim_options())?;
            (Some(run.centralized), Some((run.distributed, run.estimator)))
        }
    };
    for b in cen.iter().chain(dis.as_ref().map(|d| &d.0)) {
        let r = social_cost(b);
        cost_rows(&mut costs, b.regime.name(), &r, agents);
        let _ = writeln!(
            summary,
            "{}: J_soc = {:.8} ± {:.2e}",
            b.regime.name(),
            r.j_soc.mean,
            r.j_soc.std_error
        );
    }
    tables.push(costs);
    if let Some((d, trace)) = &dis {
        let errors = estimation_errors(d, trace, cen.as_ref())?;
        let _ = writeln!(summary, "sup_t sum_q E|err|^2 = {:.6e}", errors.sup_check);
        tables.push(error_summary_table(&errors));
        if opts.dump_trajectories {
            tables.push(error_path_table(d, trace, cen.as_ref()));
        }
    }
    if opts.dump_trajectories {
        let bundles: Vec<&TrajectoryBundle> = cen.iter().chain(dis.as_ref().map(|d| &d.0)).collect();
        tables.push(trajectory_table(&sys.spec, &bundles)?);
    }
    let regime_name = match regime {
        SimulateRegime::Centralized => Regime::Centralized.name(),
        SimulateRegime::Distributed => Regime::Distributed.name(),
        SimulateRegime::Both => "both",
    };
    let manifest = Manifest::new("simulate", &text, opts.seed, opts.paths, sys.spec.steps)
        .param("regime", regime_name)
        .param("dump_trajectories", opts.dump_trajectories);
    finish(manifest, &tables, &opts.out, summary, true)
}

pub fn cmd_compare(opts: &RunOptions) -> Result<Outcome> {
    let (spec, text) = load_spec(&opts.config, opts.steps_override)?;
    let sys = SolvedSystem::new(spec)?;
    let agents = sys.spec.total_agents();
    let cmp = run_comparison(&sys, opts.paths, opts.seed, opts.sim_options())?;
    let mut costs = cost_table();
    cost_rows(&mut costs, "centralized", &cmp.centralized, agents);
    cost_rows(&mut costs, "distributed", &cmp.distributed, agents);
    let gap_per_agent = cmp.gap_per_agent(agents);
    for (name, stat) in [
        ("J_soc", cmp.gap),
        ("J_soc_per_agent", gap_per_agent),
        ("J1", cmp.j1_gap),
        ("J2", cmp.j2_gap),
    ] {
        costs.push(vec!["gap".into(), name.into(), num(stat.mean), num(stat.std_error)]);
    }
    costs.push(vec![
        "gap".into(),
        "J2_relative_difference".into(),
        num(cmp.j2_relative_difference),
        num(0.0),
    ]);
    for (name, v) in [
        ("V_stated", cmp.value.stated),
        ("V_noise_term", cmp.value.noise_term),
        ("V_corrected", cmp.value.corrected),
    ] {
        costs.push(vec!["value".into(), name.into(), num(v), num(0.0)]);
    }
    let mut tables = vec![costs, error_summary_table(&cmp.errors)];
    if opts.dump_trajectories {
        let run = &cmp.run;
        tables.push(error_path_table(&run.distributed, &run.estimator, Some(&run.centralized)));
        tables.push(trajectory_table(&sys.spec, &[&run.centralized, &run.distributed])?);
    }
    let summary = format!(
        "centralized J_soc/N = {:.8} ± {:.2e}\ndistributed J_soc/N = {:.8} ± {:.2e}\ngap/N = {:.6e} ± {:.2e}\nJ2 relative difference = {:.3e}\nV_corrected/N = {:.8}\n",
        cmp.centralized.j_soc.mean / agents as f64,
        cmp.centralized.j_soc.std_error / agents as f64,
        cmp.distributed.j_soc.mean / agents as f64,
        cmp.distributed.j_soc.std_error / agents as f64,
        gap_per_agent.mean,
        gap_per_agent.std_error,
        cmp.j2_relative_difference,
        cmp.value.corrected / agents as f64,
    );
    let manifest = Manifest::new("compare", &text, opts.seed, opts.paths, sys.spec.steps)
        .param("dump_trajectories", opts.dump_trajectories);
    finish(manifest, &tables, &opts.out, summary, true)
}

fn stat_cells(s: Stat) -> [String; 2] {
    [num(s.mean), num(s.std_error)]
}

pub fn convergence_tables(study: &ConvergenceStudy) -> (Table, Table) {
    let k = study.rows.first().map_or(0, |r| r.sup_error_by_cluster.len());
    let mut header: Vec<String> = [
        "scale",
        "c1",
        "n",
        "paths",
        "seed",
        "gap_per_agent",
        "gap_per_agent_se",
        "sup_error",
        "sup_error_se",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..k).map(|q| format!("sup_error_cluster_{q}")));
    header.extend(
        ["sup_hat_error", "sup_mean_field_sq", "sup_estimate_sq", "j2_relative_difference", "gain_shift"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut rows = Table {
        name: "convergence".into(),
        header,
        rows: Vec::new(),
    };
    for r in &study.rows {
        let mut row = vec![
            r.scale.to_string(),
            r.c1.to_string(),
            r.n.to_string(),
            r.paths.to_string(),
            r.seed.to_string(),
        ];
        row.extend(stat_cells(r.gap_per_agent));
        row.extend(stat_cells(r.sup_error));
        row.extend(r.sup_error_by_cluster.iter().map(|&v| num(v)));
        row.extend(
            [r.sup_hat_error, r.sup_mean_field_sq, r.sup_estimate_sq, r.j2_relative_difference, r.gain_shift]
                .map(num),
        );
        rows.push(row);
    }
    let mut slopes = Table::new("slopes", &["quantity", "slope", "intercept", "r_squared"]);
    let fit_row = |name: &str, f: &super::fit::LogLogFit| {
        vec![name.to_string(), num(f.slope), num(f.intercept), num(f.r_squared)]
    };
    slopes.push(fit_row("sup_error", &study.error_fit));
    match &study.gap_fit {
        Some(f) => slopes.push(fit_row("gap_per_agent", f)),
        None => slopes.push(vec!["gap_per_agent".into(), "nan".into(), "nan".into(), "nan".into()]),
    }
    (rows, slopes)
}

pub fn cmd_converge(opts: &RunOptions, scales: &[usize]) -> Result<Outcome> {
    let (spec, text) = load_spec(&opts.config, opts.steps_override)?;
    let study = run_convergence(&spec, scales, opts.paths, opts.seed, opts.workers)?;
    let (rows, slopes) = convergence_tables(&study);
    let mut summary = String::new();
    for r in &study.rows {
        let _ = writeln!(
            summary,
            "C1 = {:>5}: gap/N = {:.4e} ± {:.1e}, sup error = {:.4e} ± {:.1e}",
            r.c1, r.gap_per_agent.mean, r.gap_per_agent.std_error, r.sup_error.mean, r.sup_error.std_error
        );
    }
    let _ = writeln!(summary, "estimation-error slope = {:.4}", study.error_fit.slope);
    match &study.gap_fit {
        Some(f) => {
            let _ = writeln!(summary, "cost-gap slope = {:.4}", f.slope);
        }
        None => {
            let _ = writeln!(summary, "cost-gap slope unavailable (non-positive gap)");
        }
    }
    let manifest = Manifest::new("converge", &text, opts.seed, opts.paths, spec.steps)
        .param("scales", scales.to_vec());
    finish(manifest, &[rows, slopes], &opts.out, summary, true)
}

pub fn cmd_oracle(opts: &RunOptions, trials: usize) -> Result<Outcome> {
    let (spec, text) = load_spec(&opts.config, opts.steps_override)?;
    let sys = SolvedSystem::new(spec)?;
    let cert = run_oracle(&sys, trials, opts.paths, opts.seed, OracleTolerances::default(), opts.workers)?;
    let mut table = Table::new("oracle_report", &["check", "max_deviation", "tolerance", "pass"]);
    let mut summary = String::new();
    for c in &cert.report.checks {
        table.push(vec![c.name.clone(), num(c.deviation), num(c.tolerance), c.pass.to_string()]);
        let _ = writeln!(
            summary,
            "{:<16} {:.3e} (tolerance {:.1e}) {}",
            c.name,
            c.deviation,
            c.tolerance,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let manifest = Manifest::new("oracle", &text, opts.seed, opts.paths, sys.spec.steps).param("trials", trials);
    let pass = cert.report.all_pass();
    finish(manifest, &[table], &opts.out, summary, pass)
}

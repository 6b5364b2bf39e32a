//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances are pinned below.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mfsocial::cli::{self, run_comparison, run_convergence, run_oracle, OracleTolerances, RunOptions, SimulateRegime};
use mfsocial::cost::{social_cost, value_function, Stat};
use mfsocial::model::NetworkTopology;
use mfsocial::simulate::{
    draw_noise, recorded_controls, simulate_centralized, simulate_coupled, simulate_openloop,
    OpenLoopControls, SimOptions, SolvedSystem,
};
use mfsocial::SystemSpec;

const TANH_TOL: f64 = 1e-6;
const GAIN_TOL: f64 = 1e-6;
const VALUE_TOL: f64 = 1e-6;
const EXACT_TOL: f64 = 1e-10;
const DRIFT_FACTOR: f64 = 10.0;
const MC_PATHS: usize = 10_000;
const MC_SIGMAS: f64 = 3.0;
const MC_MAX_REL_SE: f64 = 0.01;
const SPLIT_TOL: f64 = 1e-9;
const DEVIATION_TOL: f64 = 1e-10;
const GAP_TOL: f64 = 1e-10;
const SWEEP_SCALES: [usize; 4] = [1, 4, 16, 64];
const SWEEP_PATHS: usize = 2000;
const ERROR_SLOPE: (f64, f64) = (-1.3, -0.7);
const GAP_SLOPE_MAX: f64 = -0.2;
const MONOTONE_SIGMAS: f64 = 2.0;
const PERTURBATIONS: usize = 100;
const PERTURBATION_EPS: f64 = 0.1;
const PERTURBATION_PATHS: usize = 400;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> SystemSpec {
    cli::load_spec(&config(name), None).expect("bundled config loads").0
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    o.detail = format!("{}; {:.2}s", o.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        if elapsed > limit {
            o.pass = false;
            o.detail = format!("{} exceeds {}s", o.detail, limit.as_secs());
        }
    }
    o
}

fn scalar_closed_form() -> Outcome {
    let sys = SolvedSystem::new(load("minimal.json")).unwrap();
    let p0 = sys.riccati.p[0][0][(0, 0)];
    let err = (p0 - 1.0_f64.tanh()).abs();
    outcome(err <= TANH_TOL, format!("P(0) = {p0:.12}, |P(0) - tanh 1| = {err:.2e} <= {TANH_TOL:.0e}"))
}

fn oracle_pair() -> mfsocial::cli::Certification {
    let sys = SolvedSystem::new(load("oracle_pair.json")).unwrap();
    let tol = OracleTolerances {
        compare: mfsocial::oracle::CompareTolerances {
            gain: GAIN_TOL,
            value: VALUE_TOL,
            quadratic: VALUE_TOL,
        },
        exact: EXACT_TOL,
        drift_factor: DRIFT_FACTOR,
    };
    run_oracle(&sys, 100, 8, 11, tol, None).unwrap()
}

fn stacked_equivalence() -> Outcome {
    let cert = oracle_pair();
    let gain = cert.report.get("gain").unwrap();
    let value = cert.report.get("value").unwrap();
    let quad = cert.report.get("quadratic-form").unwrap();
    outcome(
        gain.pass && value.pass && quad.pass,
        format!(
            "gain dev {:.2e} <= {GAIN_TOL:.0e} (100 states x 20 nodes), value rel dev {:.2e} <= {VALUE_TOL:.0e} \
             (stacked {:.10}, structured {:.10}), quadratic form dev {:.2e}",
            gain.deviation, value.deviation, cert.stacked_value, cert.structured_value.corrected, quad.deviation
        ),
    )
}

fn fbsde_certification() -> Outcome {
    let cert = oracle_pair();
    let r = cert.residual;
    let drift_tol = DRIFT_FACTOR * r.step_size * r.step_size;
    outcome(
        r.control <= EXACT_TOL && r.terminal <= EXACT_TOL && r.drift <= drift_tol,
        format!(
            "control {:.2e}, terminal {:.2e} <= {EXACT_TOL:.0e}; drift {:.2e} <= 10 h^2 = {drift_tol:.2e}",
            r.control, r.terminal, r.drift
        ),
    )
}

fn monte_carlo_value() -> Outcome {
    let sys = SolvedSystem::new(load("monte_carlo.json")).unwrap();
    let noise = draw_noise(&sys.spec, MC_PATHS, 2024).unwrap();
    let b = simulate_centralized(&sys, &noise, SimOptions::default()).unwrap();
    let j = social_cost(&b).j_soc;
    let v = value_function(&sys.spec, &sys.derived, &sys.riccati).unwrap();
    let z = (j.mean - v.corrected) / j.std_error;
    let rel_se = j.std_error / j.mean;
    outcome(
        z.abs() <= MC_SIGMAS && rel_se < MC_MAX_REL_SE,
        format!(
            "E J_soc = {:.5} +- {:.5}, V_corrected = {:.5} (z = {z:.2}, V_stated z = {:.1}), se/mean = {:.3}%",
            j.mean,
            j.std_error,
            v.corrected,
            (j.mean - v.stated) / j.std_error,
            100.0 * rel_se
        ),
    )
}

fn random_controls(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn split_identity() -> Outcome {
    let spec = load("monte_carlo.json").with_counts(&[2, 4]).unwrap().with_steps(200).unwrap();
    let sys = SolvedSystem::new(spec).unwrap();
    let noise = draw_noise(&sys.spec, 4, 5).unwrap();
    let len = sys.spec.steps * sys.spec.total_agents();
    let mut worst = 0.0_f64;
    for trial in 0..50 {
        let u = random_controls(len, 1000 + trial);
        let b = simulate_openloop(&sys, OpenLoopControls::Shared(&u), &noise, SimOptions::default()).unwrap();
        for c in b.path_costs() {
            worst = worst.max((c.social - (c.j1 + c.j2)).abs() / c.social);
        }
    }
    outcome(worst <= SPLIT_TOL, format!("max |J_soc - (J1 + J2)| / J_soc = {worst:.2e} <= {SPLIT_TOL:.0e} over 50 x 4 paths"))
}

fn deviation_identity() -> Outcome {
    let spec = load("monte_carlo.json").with_steps(200).unwrap();
    let sys = SolvedSystem::new(spec).unwrap();
    let noise = draw_noise(&sys.spec, 50, 6).unwrap();
    let run = simulate_coupled(
        &sys,
        &noise,
        SimOptions {
            retain_agents: true,
            workers: None,
        },
    )
    .unwrap();
    let (c, d) = (&run.centralized, &run.distributed);
    let mut zeta = 0.0_f64;
    for path in 0..50 {
        for step in 0..=sys.spec.steps {
            for agent in 0..sys.spec.total_agents() {
                let q = sys.spec.cluster_of(agent).unwrap();
                let zc = c.state(path, step, agent).unwrap()[0] - c.cluster_mean(path, step, q)[0];
                let zd = d.state(path, step, agent).unwrap()[0] - d.cluster_mean(path, step, q)[0];
                zeta = zeta.max((zc - zd).abs());
            }
        }
    }
    let mut j2 = 0.0_f64;
    for (pc, pd) in c.paths.iter().zip(&d.paths) {
        j2 = j2.max((pc.cost.j2 - pd.cost.j2).abs() / pc.cost.j2);
    }
    let gap_in_mean = (Stat::paired(
        &d.path_costs().iter().map(|p| p.social).collect::<Vec<_>>(),
        &c.path_costs().iter().map(|p| p.social).collect::<Vec<_>>(),
    )
    .mean)
        > 0.0;
    outcome(
        zeta <= DEVIATION_TOL && j2 <= SPLIT_TOL,
        format!(
            "max |zeta_hat - zeta_check| = {zeta:.2e} <= {DEVIATION_TOL:.0e}; max rel |J2 diff| = {j2:.2e} <= {SPLIT_TOL:.0e}; gap > 0: {gap_in_mean}"
        ),
    )
}

fn complete_graph_exactness() -> Outcome {
    let mut spec = load("monte_carlo.json").with_steps(200).unwrap();
    spec.topology = NetworkTopology::new(DMatrix::from_element(2, 2, 1.0), spec.topology.weights().clone()).unwrap();
    let sys = SolvedSystem::new(spec).unwrap();
    let noise = draw_noise(&sys.spec, 100, 7).unwrap();
    let run = simulate_coupled(
        &sys,
        &noise,
        SimOptions {
            retain_agents: true,
            workers: None,
        },
    )
    .unwrap();
    let bitwise = run
        .centralized
        .paths
        .iter()
        .zip(&run.distributed.paths)
        .all(|(a, b)| a.states == b.states && a.controls == b.controls);
    let cmp = run_comparison(&sys, 100, 7, SimOptions::default()).unwrap();
    let gap = cmp.gap.mean.abs();
    outcome(bitwise && gap <= GAP_TOL, format!("trajectories bitwise equal: {bitwise}; |gap| = {gap:.2e} <= {GAP_TOL:.0e}"))
}

fn sweep() -> mfsocial::cli::ConvergenceStudy {
    run_convergence(&load("convergence_base.json"), &SWEEP_SCALES, SWEEP_PATHS, 99, None).unwrap()
}

fn estimation_rate(study: &mfsocial::cli::ConvergenceStudy) -> Outcome {
    let s = study.error_fit.slope;
    let points: Vec<String> = study
        .rows
        .iter()
        .map(|r| format!("C1={}: {:.3e}", r.c1, r.sup_error.mean))
        .collect();
    outcome(
        (ERROR_SLOPE.0..=ERROR_SLOPE.1).contains(&s),
        format!("slope {s:.3} in [{}, {}] (R^2 {:.4}); {}", ERROR_SLOPE.0, ERROR_SLOPE.1, study.error_fit.r_squared, points.join(", ")),
    )
}

fn gap_rate(study: &mfsocial::cli::ConvergenceStudy) -> Outcome {
    let monotone = study.rows.windows(2).all(|w| {
        let (a, b) = (w[0].gap_per_agent, w[1].gap_per_agent);
        b.mean <= a.mean + MONOTONE_SIGMAS * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt()
    });
    let slope = study.gap_fit.map(|f| f.slope);
    let points: Vec<String> = study
        .rows
        .iter()
        .map(|r| format!("C1={}: {:.3e}+-{:.1e}", r.c1, r.gap_per_agent.mean, r.gap_per_agent.std_error))
        .collect();
    outcome(
        monotone && slope.is_some_and(|s| s <= GAP_SLOPE_MAX),
        format!(
            "non-increasing within 2 se: {monotone}; slope {} <= {GAP_SLOPE_MAX}; {}",
            slope.map_or("n/a".to_string(), |s| format!("{s:.3}")),
            points.join(", ")
        ),
    )
}

fn perturbation_test() -> Outcome {
    let spec = load("monte_carlo.json").with_steps(200).unwrap();
    let sys = SolvedSystem::new(spec).unwrap();
    let noise = draw_noise(&sys.spec, PERTURBATION_PATHS, 8).unwrap();
    let opts = SimOptions {
        retain_agents: true,
        workers: None,
    };
    let base = simulate_centralized(&sys, &noise, opts).unwrap();
    let recorded = recorded_controls(&base).unwrap();
    let base_costs: Vec<f64> = base.path_costs().iter().map(|c| c.social).collect();
    let (agents, steps) = (sys.spec.total_agents(), sys.spec.steps);
    let lean = SimOptions::default();
    let mut worst_z = f64::INFINITY;
    let mut violations = 0;
    for trial in 0..PERTURBATIONS {
        // Smooth deterministic perturbation per agent: eps * (a + b cos(pi t/T) + c sin(pi t/T)) / sqrt(3).
        let coeffs = random_controls(3 * agents, 5000 + trial as u64);
        let mut delta = vec![0.0; steps * agents];
        for step in 0..steps {
            let phase = std::f64::consts::PI * sys.spec.time(step) / sys.spec.horizon;
            for agent in 0..agents {
                let c = &coeffs[3 * agent..3 * agent + 3];
                delta[step * agents + agent] =
                    PERTURBATION_EPS * (c[0] + c[1] * phase.cos() + c[2] * phase.sin()) / 3f64.sqrt();
            }
        }
        let perturbed: Vec<Vec<f64>> = recorded
            .iter()
            .map(|u| u.iter().zip(&delta).map(|(a, b)| a + b).collect())
            .collect();
        let b = simulate_openloop(&sys, OpenLoopControls::PerPath(&perturbed), &noise, lean).unwrap();
        let costs: Vec<f64> = b.path_costs().iter().map(|c| c.social).collect();
        let diff = Stat::paired(&costs, &base_costs);
        let z = diff.mean / diff.std_error.max(f64::MIN_POSITIVE);
        worst_z = worst_z.min(z);
        if diff.mean < -MC_SIGMAS * diff.std_error {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{violations} of {PERTURBATIONS} perturbations lower J_soc by > 3 se; smallest paired z = {worst_z:.2}"),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut compared = 0;
    type Runner = fn(&RunOptions) -> mfsocial::Result<cli::Outcome>;
    let commands: [(&str, &str, usize, bool, Runner); 5] = [
        ("riccati", "oracle_pair.json", 0, false, |o| cli::cmd_riccati(o)),
        ("simulate", "convergence_base.json", 40, true, |o| cli::cmd_simulate(o, SimulateRegime::Both)),
        ("compare", "monte_carlo.json", 300, false, |o| cli::cmd_compare(o)),
        ("converge", "convergence_base.json", 60, false, |o| cli::cmd_converge(o, &[1, 2, 4])),
        ("oracle", "oracle_pair.json", 6, false, |o| cli::cmd_oracle(o, 10)),
    ];
    for (name, cfg, paths, dump, run) in commands {
        let mut outputs = Vec::new();
        for workers in [1, 4] {
            let mut opts = RunOptions::new(config(cfg), tmp.path().join(format!("{name}-{workers}")));
            opts.seed = 42;
            opts.paths = paths;
            opts.dump_trajectories = dump;
            opts.workers = Some(workers);
            if name == "compare" {
                opts.steps_override = Some(100);
            }
            run(&opts).unwrap();
            outputs.push(read_dir_bytes(&opts.out));
        }
        compared += outputs[0].len();
        if outputs[0] != outputs[1] {
            differing.push(name);
        }
    }
    outcome(
        differing.is_empty(),
        format!("{compared} files from 5 commands byte-identical across workers {{1, 4}}; differing: {differing:?}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!("{} [{id:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "scalar Riccati closed form", timed(Some(Duration::from_secs(1)), scalar_closed_form));
    record(2, "stacked-oracle equivalence", timed(Some(Duration::from_secs(60)), stacked_equivalence));
    record(3, "costate (FBSDE) certification", timed(Some(Duration::from_secs(60)), fbsde_certification));
    record(4, "Monte Carlo value consistency", timed(Some(Duration::from_secs(300)), monte_carlo_value));
    record(5, "cost split identity", timed(None, split_identity));
    record(6, "deviation identity under coupling", timed(None, deviation_identity));
    record(7, "complete-graph exactness", timed(None, complete_graph_exactness));
    let start = Instant::now();
    let study = sweep();
    let sweep_time = start.elapsed();
    let over = sweep_time > Duration::from_secs(900);
    let mut o8 = estimation_rate(&study);
    o8.detail = format!("{}; sweep {:.2}s", o8.detail, sweep_time.as_secs_f64());
    o8.pass &= !over;
    record(8, "estimation-error rate", o8);
    record(9, "cost-gap rate", gap_rate(&study));
    record(10, "optimality under perturbation", timed(None, perturbation_test));
    record(11, "determinism across worker counts", timed(None, determinism));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

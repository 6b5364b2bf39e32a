//! Euler–Maruyama simulation of the `N`-agent system.
//!
//! All regimes (centralized feedback, distributed feedback, open-loop replay)
//! advance agents with the same update
//!
//! ```text
//! x_{k+1} = x_k + h (A_q x_k + B_q u_k + Gbar_q x^K_k) + Sigma_q dW_k
//! ```
//!
//! and differ only in how `u_k` is produced. Cluster means are always
//! recomputed from agent states, never integrated separately. Noise is drawn
//! from a counter-based generator keyed by `(seed, path, agent)` so every
//! regime and every worker count sees identical increments.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::control::GainSchedule;
use crate::cost::{path_cost, PathCost};
use crate::error::{Error, Result};
use crate::estimator::{init_estimators, step_estimators, EstimatorTrace};
use crate::linalg::gemv_acc;
use crate::model::{derive_matrices, DerivedMatrices, SystemSpec};
use crate::riccati::{closed_loop_matrices, solve, ClosedLoop, RiccatiSolution};

/// A spec together with everything solved from it once.
#[derive(Debug, Clone)]
pub struct SolvedSystem {
    pub spec: SystemSpec,
    pub derived: DerivedMatrices,
    pub riccati: RiccatiSolution,
    pub gains: GainSchedule,
    pub closed_loop: ClosedLoop,
}

impl SolvedSystem {
    pub fn new(spec: SystemSpec) -> Result<Self> {
        let derived = derive_matrices(&spec);
        let riccati = solve(&spec, &derived)?;
        let gains = GainSchedule::new(&riccati, &derived);
        let closed_loop = closed_loop_matrices(&riccati, &derived);
        Ok(Self {
            spec,
            derived,
            riccati,
            gains,
            closed_loop,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Centralized,
    Distributed,
    OpenLoop,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Centralized => "centralized",
            Regime::Distributed => "distributed",
            Regime::OpenLoop => "open-loop",
        }
    }
}

/// Deterministic source of initial states and Brownian increments.
///
/// Nothing is stored: [`NoiseBundle::path`] regenerates a path's draws on
/// demand, so bundles of any size cost O(1) memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub step_size: f64,
    agents: usize,
    n: usize,
    d_w: usize,
    /// Cluster of each agent.
    cluster_of: Vec<usize>,
    init_mean: Vec<Vec<f64>>,
    init_sqrt: Vec<nalgebra::DMatrix<f64>>,
}

/// Draws for one path: initial states `[agent][n]` and increments `[step][agent][d_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub init: Vec<f64>,
    pub increments: Vec<f64>,
}

pub fn draw_noise(spec: &SystemSpec, paths: usize, seed: u64) -> Result<NoiseBundle> {
    if paths == 0 {
        return Err(Error::Argument("paths must be at least 1".into()));
    }
    let derived = derive_matrices(spec);
    let offsets = spec.cluster_offsets();
    let cluster_of = (0..spec.k())
        .flat_map(|q| std::iter::repeat_n(q, offsets[q + 1] - offsets[q]))
        .collect();
    Ok(NoiseBundle {
        seed,
        paths,
        steps: spec.steps,
        step_size: spec.step_size(),
        agents: spec.total_agents(),
        n: spec.state_dim,
        d_w: spec.noise_dim,
        cluster_of,
        init_mean: spec
            .clusters
            .iter()
            .map(|c| c.init_mean.iter().copied().collect())
            .collect(),
        init_sqrt: derived.init_sqrt,
    })
}

impl NoiseBundle {
    pub fn agents(&self) -> usize {
        self.agents
    }

    fn stream(&self, path: usize, agent: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(path as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(agent as u64).to_le_bytes());
        key[24..32].copy_from_slice(b"mfsnoise");
        ChaCha8Rng::from_seed(key)
    }

    /// Generates the draws of one path. Each agent's stream yields its
    /// initial-state normals first, then increments step by step.
    pub fn path(&self, path: usize) -> PathNoise {
        let (n, d_w, agents) = (self.n, self.d_w, self.agents);
        let sqrt_h = self.step_size.sqrt();
        let mut init = vec![0.0; agents * n];
        let mut increments = vec![0.0; self.steps * agents * d_w];
        let mut z = vec![0.0; n];
        for agent in 0..agents {
            let mut rng = self.stream(path, agent);
            let q = self.cluster_of[agent];
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let x0 = &mut init[agent * n..(agent + 1) * n];
            x0.copy_from_slice(&self.init_mean[q]);
            gemv_acc(x0, &self.init_sqrt[q], &z, 1.0);
            for step in 0..self.steps {
                let base = (step * agents + agent) * d_w;
                for c in 0..d_w {
                    let draw: f64 = StandardNormal.sample(&mut rng);
                    increments[base + c] = sqrt_h * draw;
                }
            }
        }
        PathNoise { init, increments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Keep per-agent states and controls (needed for dumps and replays).
    pub retain_agents: bool,
    /// Worker threads; `None` uses the default pool.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTrajectory {
    /// `[(step * N + agent) * n + c]`, `steps + 1` steps, when retained.
    pub states: Option<Vec<f64>>,
    /// `[(step * N + agent) * m + c]`, `steps` steps, when retained.
    pub controls: Option<Vec<f64>>,
    /// Cluster means `[(step * K + q) * n + c]`, `steps + 1` steps.
    pub cluster_means: Vec<f64>,
    pub cost: PathCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub regime: Regime,
    pub seed: u64,
    pub steps: usize,
    pub step_size: f64,
    pub agents: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub paths: Vec<PathTrajectory>,
}

impl TrajectoryBundle {
    pub fn has_agents(&self) -> bool {
        self.paths.iter().all(|p| p.states.is_some() && p.controls.is_some())
    }

    pub fn state(&self, path: usize, step: usize, agent: usize) -> Option<&[f64]> {
        let n = self.n;
        let i = (step * self.agents + agent) * n;
        self.paths[path].states.as_ref().map(|s| &s[i..i + n])
    }

    pub fn control(&self, path: usize, step: usize, agent: usize) -> Option<&[f64]> {
        let m = self.m;
        let i = (step * self.agents + agent) * m;
        self.paths[path].controls.as_ref().map(|u| &u[i..i + m])
    }

    /// `x^K_q` at a step.
    pub fn cluster_mean(&self, path: usize, step: usize, q: usize) -> &[f64] {
        let i = (step * self.k + q) * self.n;
        &self.paths[path].cluster_means[i..i + self.n]
    }

    /// Stacked `x^K` at a step.
    pub fn global_mean(&self, path: usize, step: usize) -> &[f64] {
        let nk = self.n * self.k;
        &self.paths[path].cluster_means[step * nk..(step + 1) * nk]
    }

    /// `z^K_q = (1/K) sum_p m_qp x^K_p`.
    pub fn coupling(&self, spec: &SystemSpec, path: usize, step: usize, q: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.n];
        for p in 0..self.k {
            let w = spec.topology.weight(q, p) / self.k as f64;
            for (zi, &x) in z.iter_mut().zip(self.cluster_mean(path, step, p)) {
                *zi += w * x;
            }
        }
        z
    }

    pub fn path_costs(&self) -> Vec<PathCost> {
        self.paths.iter().map(|p| p.cost.clone()).collect()
    }
}

/// Externally supplied controls, each array laid out `[(step * N + agent) * m + c]`.
#[derive(Debug, Clone, Copy)]
pub enum OpenLoopControls<'a> {
    /// One control history applied on every path.
    Shared(&'a [f64]),
    /// One control history per path.
    PerPath(&'a [Vec<f64>]),
}

impl OpenLoopControls<'_> {
    fn for_path(&self, path: usize) -> &[f64] {
        match self {
            OpenLoopControls::Shared(u) => u,
            OpenLoopControls::PerPath(all) => &all[path],
        }
    }
}

enum Law<'a> {
    Centralized,
    Distributed,
    OpenLoop(&'a [f64]),
}

/// Raw output of one simulated path.
pub(crate) struct PathRun {
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub means: Vec<f64>,
    pub estimates: Option<Vec<f64>>,
}

pub(crate) fn compute_means(spec: &SystemSpec, offsets: &[usize], states: &[f64], out: &mut [f64]) {
    let n = spec.state_dim;
    out.fill(0.0);
    for q in 0..spec.k() {
        let block = &mut out[q * n..(q + 1) * n];
        for agent in offsets[q]..offsets[q + 1] {
            for (b, &x) in block.iter_mut().zip(&states[agent * n..(agent + 1) * n]) {
                *b += x;
            }
        }
        let count = (offsets[q + 1] - offsets[q]) as f64;
        for b in block.iter_mut() {
            *b /= count;
        }
    }
}

fn run_path(sys: &SolvedSystem, law: Law<'_>, noise: &PathNoise, path: usize) -> Result<PathRun> {
    let spec = &sys.spec;
    let d = &sys.derived;
    let (n, m, k, d_w) = (spec.state_dim, spec.control_dim, spec.k(), spec.noise_dim);
    let agents = spec.total_agents();
    let steps = spec.steps;
    let h = spec.step_size();
    let nk = n * k;
    let offsets = spec.cluster_offsets();

    let mut states = vec![0.0; (steps + 1) * agents * n];
    let mut controls = vec![0.0; steps * agents * m];
    let mut means = vec![0.0; (steps + 1) * nk];
    states[..agents * n].copy_from_slice(&noise.init);
    compute_means(spec, &offsets, &states[..agents * n], &mut means[..nk]);

    let distributed = matches!(law, Law::Distributed);
    let mut estimators = if distributed {
        Some(init_estimators(spec, d, &means[..nk]))
    } else {
        None
    };
    let mut estimates = estimators.as_ref().map(|_| vec![0.0; (steps + 1) * k * nk]);
    if let (Some(est), Some(trace)) = (&estimators, &mut estimates) {
        for (q, e) in est.iter().enumerate() {
            trace[q * nk..(q + 1) * nk].copy_from_slice(e.estimate());
        }
    }

    let mut mean_terms = vec![0.0; k * m];
    let mut coupling = vec![0.0; k * n];
    let mut drift = vec![0.0; n];
    for step in 0..steps {
        let (done, rest) = states.split_at_mut((step + 1) * agents * n);
        let x_now = &done[step * agents * n..];
        let x_next = &mut rest[..agents * n];
        let mf = &means[step * nk..(step + 1) * nk];

        for q in 0..k {
            let c = &mut coupling[q * n..(q + 1) * n];
            c.fill(0.0);
            gemv_acc(c, &d.gbar[q], mf, 1.0);
            let y = match (&law, &estimators) {
                (Law::Distributed, Some(est)) => est[q].estimate(),
                _ => mf,
            };
            if !matches!(law, Law::OpenLoop(_)) {
                sys.gains
                    .mean_term(q, step, y, &mut mean_terms[q * m..(q + 1) * m]);
            }
        }

        let u_step = &mut controls[step * agents * m..(step + 1) * agents * m];
        for q in 0..k {
            let cl = &spec.clusters[q];
            for agent in offsets[q]..offsets[q + 1] {
                let x = &x_now[agent * n..(agent + 1) * n];
                let u = &mut u_step[agent * m..(agent + 1) * m];
                match law {
                    Law::OpenLoop(given) => {
                        let i = (step * agents + agent) * m;
                        u.copy_from_slice(&given[i..i + m]);
                    }
                    _ => sys
                        .gains
                        .finish(q, step, x, &mean_terms[q * m..(q + 1) * m], u),
                }
                drift.fill(0.0);
                gemv_acc(&mut drift, &cl.a, x, 1.0);
                gemv_acc(&mut drift, &cl.b, u, 1.0);
                for (dr, &c) in drift.iter_mut().zip(&coupling[q * n..(q + 1) * n]) {
                    *dr += c;
                }
                let out = &mut x_next[agent * n..(agent + 1) * n];
                for ((o, &xi), &dr) in out.iter_mut().zip(x).zip(&drift) {
                    *o = xi + h * dr;
                }
                let base = (step * agents + agent) * d_w;
                gemv_acc(out, &cl.sigma, &noise.increments[base..base + d_w], 1.0);
            }
        }
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDivergence {
                path,
                step: step + 1,
            });
        }
        let (before, after) = means.split_at_mut((step + 1) * nk);
        let _ = before;
        compute_means(spec, &offsets, x_next, &mut after[..nk]);

        if let (Some(est), Some(trace)) = (&mut estimators, &mut estimates) {
            let observed = &means[(step + 1) * nk..(step + 2) * nk];
            step_estimators(spec, &sys.closed_loop, est, step, h, observed).map_err(|e| match e {
                Error::EstimatorDivergence { cluster, step, .. } => Error::EstimatorDivergence {
                    path,
                    cluster,
                    step,
                },
                other => other,
            })?;
            let base = (step + 1) * k * nk;
            for (q, e) in est.iter().enumerate() {
                trace[base + q * nk..base + (q + 1) * nk].copy_from_slice(e.estimate());
            }
        }
    }
    Ok(PathRun {
        states,
        controls,
        means,
        estimates,
    })
}

/// Runs `f` for every path, in parallel when available, returning results in path order.
pub fn map_paths<T, F>(paths: usize, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers == Some(1) {
            return (0..paths).map(f).collect();
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = workers {
            builder = builder.num_threads(w);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
        pool.install(|| (0..paths).into_par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..paths).map(f).collect()
    }
}

fn finish_path(sys: &SolvedSystem, run: PathRun, retain: bool) -> PathTrajectory {
    let cost = path_cost(
        &sys.spec,
        &sys.derived,
        &run.states,
        &run.controls,
        &run.means,
    );
    PathTrajectory {
        states: retain.then_some(run.states),
        controls: retain.then_some(run.controls),
        cluster_means: run.means,
        cost,
    }
}

fn bundle(sys: &SolvedSystem, regime: Regime, noise: &NoiseBundle, paths: Vec<PathTrajectory>) -> TrajectoryBundle {
    TrajectoryBundle {
        regime,
        seed: noise.seed,
        steps: sys.spec.steps,
        step_size: sys.spec.step_size(),
        agents: sys.spec.total_agents(),
        n: sys.spec.state_dim,
        m: sys.spec.control_dim,
        k: sys.spec.k(),
        paths,
    }
}

fn check_noise(sys: &SolvedSystem, noise: &NoiseBundle) -> Result<()> {
    if noise.steps != sys.spec.steps
        || noise.agents != sys.spec.total_agents()
        || noise.n != sys.spec.state_dim
        || noise.d_w != sys.spec.noise_dim
        || (noise.step_size - sys.spec.step_size()).abs() > 0.0
    {
        return Err(Error::GridMismatch(
            "noise bundle was drawn for a different grid or population".into(),
        ));
    }
    Ok(())
}

pub fn simulate_centralized(
    sys: &SolvedSystem,
    noise: &NoiseBundle,
    opts: SimOptions,
) -> Result<TrajectoryBundle> {
    check_noise(sys, noise)?;
    let paths = map_paths(noise.paths, opts.workers, |p| {
        let run = run_path(sys, Law::Centralized, &noise.path(p), p)?;
        Ok(finish_path(sys, run, opts.retain_agents))
    })?;
    Ok(bundle(sys, Regime::Centralized, noise, paths))
}

pub fn simulate_distributed(
    sys: &SolvedSystem,
    noise: &NoiseBundle,
    opts: SimOptions,
) -> Result<(TrajectoryBundle, EstimatorTrace)> {
    check_noise(sys, noise)?;
    let out = map_paths(noise.paths, opts.workers, |p| {
        let mut run = run_path(sys, Law::Distributed, &noise.path(p), p)?;
        let est = run.estimates.take().expect("distributed run records estimates");
        Ok((finish_path(sys, run, opts.retain_agents), est))
    })?;
    let (paths, estimates): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let trace = EstimatorTrace::new(&sys.spec, estimates);
    Ok((bundle(sys, Regime::Distributed, noise, paths), trace))
}

pub fn simulate_openloop(
    sys: &SolvedSystem,
    controls: OpenLoopControls<'_>,
    noise: &NoiseBundle,
    opts: SimOptions,
) -> Result<TrajectoryBundle> {
    check_noise(sys, noise)?;
    let expected = sys.spec.steps * sys.spec.total_agents() * sys.spec.control_dim;
    match controls {
        OpenLoopControls::Shared(u) if u.len() != expected => {
            return Err(Error::Shape(format!(
                "controls have {} entries, expected steps*N*m = {expected}",
                u.len()
            )))
        }
        OpenLoopControls::PerPath(all) => {
            if all.len() != noise.paths {
                return Err(Error::Shape(format!(
                    "{} control histories for {} paths",
                    all.len(),
                    noise.paths
                )));
            }
            if let Some(bad) = all.iter().position(|u| u.len() != expected) {
                return Err(Error::Shape(format!(
                    "controls of path {bad} have {} entries, expected {expected}",
                    all[bad].len()
                )));
            }
        }
        OpenLoopControls::Shared(_) => {}
    }
    let paths = map_paths(noise.paths, opts.workers, |p| {
        let run = run_path(sys, Law::OpenLoop(controls.for_path(p)), &noise.path(p), p)?;
        Ok(finish_path(sys, run, opts.retain_agents))
    })?;
    Ok(bundle(sys, Regime::OpenLoop, noise, paths))
}

/// Centralized and distributed runs on identical noise, path by path.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub centralized: TrajectoryBundle,
    pub distributed: TrajectoryBundle,
    pub estimator: EstimatorTrace,
}

pub fn simulate_coupled(
    sys: &SolvedSystem,
    noise: &NoiseBundle,
    opts: SimOptions,
) -> Result<CoupledRun> {
    check_noise(sys, noise)?;
    let out = map_paths(noise.paths, opts.workers, |p| {
        let draws = noise.path(p);
        let c = run_path(sys, Law::Centralized, &draws, p)?;
        let mut d = run_path(sys, Law::Distributed, &draws, p)?;
        let est = d.estimates.take().expect("distributed run records estimates");
        Ok((
            finish_path(sys, c, opts.retain_agents),
            finish_path(sys, d, opts.retain_agents),
            est,
        ))
    })?;
    let mut cen = Vec::with_capacity(out.len());
    let mut dis = Vec::with_capacity(out.len());
    let mut est = Vec::with_capacity(out.len());
    for (c, d, e) in out {
        cen.push(c);
        dis.push(d);
        est.push(e);
    }
    Ok(CoupledRun {
        centralized: bundle(sys, Regime::Centralized, noise, cen),
        distributed: bundle(sys, Regime::Distributed, noise, dis),
        estimator: EstimatorTrace::new(&sys.spec, est),
    })
}

/// Concatenated control histories of a retained bundle, one per path, for open-loop replay.
pub fn recorded_controls(bundle: &TrajectoryBundle) -> Result<Vec<Vec<f64>>> {
    bundle
        .paths
        .iter()
        .map(|p| p.controls.clone().ok_or(Error::MissingTrajectories))
        .collect()
}

//! Individual and social costs, their mean/deviation split, and the value function.
//!
//! Running costs use the left-endpoint rule on the simulation grid, matching
//! the zero-order hold of the simulator; the terminal term is evaluated at `T`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, trapezoid, weighted_sq};
use crate::model::{DerivedMatrices, SystemSpec};
use crate::riccati::RiccatiSolution;
use crate::simulate::TrajectoryBundle;

/// Costs realized along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCost {
    /// `J_soc = sum_i J_i`.
    pub social: f64,
    /// Cluster-mean part: tracking of `Gammabar_q x^K` and average-control energy.
    pub j1: f64,
    /// Deviation part: `zeta_i = x_i - x^K_q`, `v_i = u_i - u^K_q`.
    pub j2: f64,
    /// `J_i` for every agent.
    pub per_agent: Vec<f64>,
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub std_error: f64,
}

impl Stat {
    /// Summed in the given order, so results do not depend on scheduling.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self::default();
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, std_error: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
        }
    }

    /// Statistic of the paired differences `a_i - b_i`.
    pub fn paired(a: &[f64], b: &[f64]) -> Self {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::from_samples(&diff)
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            mean: self.mean * factor,
            std_error: self.std_error * factor.abs(),
        }
    }
}

/// Costs of one regime, averaged over paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub paths: usize,
    pub j_soc: Stat,
    pub j1: Stat,
    pub j2: Stat,
    /// Path average of `J_i`.
    pub per_agent: Vec<f64>,
    pub per_path: Vec<PathCost>,
    pub quadrature: &'static str,
}

impl CostReport {
    pub fn social_samples(&self) -> Vec<f64> {
        self.per_path.iter().map(|c| c.social).collect()
    }
}

/// Evaluates every cost of one path from flat state/control/mean buffers
/// laid out as in [`crate::simulate::PathTrajectory`].
pub fn path_cost(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    states: &[f64],
    controls: &[f64],
    means: &[f64],
) -> PathCost {
    let (n, m, k) = (spec.state_dim, spec.control_dim, spec.k());
    let agents = spec.total_agents();
    let steps = spec.steps;
    let h = spec.step_size();
    let nk = n * k;
    let offsets = spec.cluster_offsets();

    let mut per_agent_run = vec![0.0; agents];
    let mut per_agent_term = vec![0.0; agents];
    let (mut j1_run, mut j2_run, mut j1_term, mut j2_term) = (0.0, 0.0, 0.0, 0.0);
    let mut target = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut u_mean = vec![0.0; m];
    let mut du = vec![0.0; m];

    for step in 0..=steps {
        let terminal = step == steps;
        let xk = &means[step * nk..(step + 1) * nk];
        let x_all = &states[step * agents * n..(step + 1) * agents * n];
        for q in 0..k {
            let c = &spec.clusters[q];
            let state_w = if terminal { &c.h } else { &c.q };
            target.fill(0.0);
            gemv_acc(&mut target, &derived.gammabar[q], xk, 1.0);
            let xq = &xk[q * n..(q + 1) * n];
            let range = offsets[q]..offsets[q + 1];
            let count = range.len() as f64;

            if !terminal {
                u_mean.fill(0.0);
                for agent in range.clone() {
                    let u = &controls[(step * agents + agent) * m..(step * agents + agent + 1) * m];
                    for (a, &b) in u_mean.iter_mut().zip(u) {
                        *a += b;
                    }
                }
                for a in u_mean.iter_mut() {
                    *a /= count;
                }
            }

            for (d, (&x, &t)) in diff.iter_mut().zip(xq.iter().zip(&target)) {
                *d = x - t;
            }
            let mut mean_part = weighted_sq(state_w, &diff);
            if !terminal {
                mean_part += weighted_sq(&c.r, &u_mean);
            }

            let mut dev_part = 0.0;
            for agent in range {
                let x = &x_all[agent * n..(agent + 1) * n];
                for (d, (&xi, &t)) in diff.iter_mut().zip(x.iter().zip(&target)) {
                    *d = xi - t;
                }
                let mut own = weighted_sq(state_w, &diff);
                for (d, (&xi, &xm)) in diff.iter_mut().zip(x.iter().zip(xq)) {
                    *d = xi - xm;
                }
                dev_part += weighted_sq(state_w, &diff);
                if !terminal {
                    let u = &controls[(step * agents + agent) * m..(step * agents + agent + 1) * m];
                    own += weighted_sq(&c.r, u);
                    for (d, (&ui, &um)) in du.iter_mut().zip(u.iter().zip(&u_mean)) {
                        *d = ui - um;
                    }
                    dev_part += weighted_sq(&c.r, &du);
                    per_agent_run[agent] += own;
                } else {
                    per_agent_term[agent] = own;
                }
            }
            if terminal {
                j1_term += count * mean_part;
                j2_term += dev_part;
            } else {
                j1_run += count * mean_part;
                j2_run += dev_part;
            }
        }
    }
    let per_agent: Vec<f64> = per_agent_run
        .iter()
        .zip(&per_agent_term)
        .map(|(r, t)| h * r + t)
        .collect();
    PathCost {
        social: per_agent.iter().sum(),
        j1: h * j1_run + j1_term,
        j2: h * j2_run + j2_term,
        per_agent,
    }
}

fn report(costs: Vec<PathCost>) -> CostReport {
    let paths = costs.len();
    let pick = |f: fn(&PathCost) -> f64| Stat::from_samples(&costs.iter().map(f).collect::<Vec<_>>());
    let agents = costs.first().map_or(0, |c| c.per_agent.len());
    let mut per_agent = vec![0.0; agents];
    for c in &costs {
        for (a, &v) in per_agent.iter_mut().zip(&c.per_agent) {
            *a += v;
        }
    }
    for a in per_agent.iter_mut() {
        *a /= paths.max(1) as f64;
    }
    CostReport {
        paths,
        j_soc: pick(|c| c.social),
        j1: pick(|c| c.j1),
        j2: pick(|c| c.j2),
        per_agent,
        per_path: costs,
        quadrature: "left-endpoint",
    }
}

/// Cost report of a simulated regime, from the costs accumulated during simulation.
pub fn social_cost(bundle: &TrajectoryBundle) -> CostReport {
    report(bundle.path_costs())
}

/// Recomputes every path cost from retained trajectories.
pub fn recompute_social_cost(
    bundle: &TrajectoryBundle,
    spec: &SystemSpec,
    derived: &DerivedMatrices,
) -> Result<CostReport> {
    let costs = bundle
        .paths
        .iter()
        .map(|p| match (&p.states, &p.controls) {
            (Some(x), Some(u)) => Ok(path_cost(spec, derived, x, u, &p.cluster_means)),
            _ => Err(Error::MissingTrajectories),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(costs))
}

/// Path-averaged `(J1, J2)`.
pub fn cost_decomposition(bundle: &TrajectoryBundle) -> (Stat, Stat) {
    let r = social_cost(bundle);
    (r.j1, r.j2)
}

/// Value of the optimal centralized controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueFunction {
    /// Quadratic form in the initial states only.
    pub stated: f64,
    /// `∫ [sum_q N_q tr(Sigma_q^T P_q Sigma_q) + sum_q tr(Sigma_q^T (K^K)_qq Sigma_q)] dt`.
    pub noise_term: f64,
    pub corrected: f64,
}

fn noise_term(spec: &SystemSpec, riccati: &RiccatiSolution) -> f64 {
    let n = spec.state_dim;
    let values: Vec<f64> = (0..riccati.times.len())
        .map(|t| {
            spec.clusters
                .iter()
                .enumerate()
                .map(|(q, c)| {
                    let s = &c.sigma;
                    let kqq = riccati.kk[t].view((q * n, q * n), (n, n));
                    c.count as f64 * (s.transpose() * &riccati.p[q][t] * s).trace()
                        + (s.transpose() * kqq * s).trace()
                })
                .sum()
        })
        .collect();
    trapezoid(&values, riccati.step_size())
}

fn check_grid(spec: &SystemSpec, riccati: &RiccatiSolution) -> Result<()> {
    if riccati.times.len() != spec.steps + 1 || riccati.clusters() != spec.k() {
        return Err(Error::GridMismatch(
            "Riccati solution does not match the spec grid".into(),
        ));
    }
    Ok(())
}

fn finish(stated: f64, noise_term: f64) -> ValueFunction {
    ValueFunction {
        stated,
        noise_term,
        corrected: stated + noise_term,
    }
}

/// Value under the configured Gaussian initial law, using exact second moments.
pub fn value_function(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    riccati: &RiccatiSolution,
) -> Result<ValueFunction> {
    check_grid(spec, riccati)?;
    let n = spec.state_dim;
    let mut stated = 0.0;
    let mut mean_cov = DMatrix::zeros(n * spec.k(), n * spec.k());
    for (q, c) in spec.clusters.iter().enumerate() {
        let p0 = &riccati.p[q][0];
        let own = c.init_mean.dot(&(p0 * &c.init_mean)) + (p0 * &c.init_cov).trace();
        stated += c.count as f64 * own;
        mean_cov
            .view_mut((q * n, q * n), (n, n))
            .copy_from(&(&c.init_cov / c.count as f64));
    }
    let nk0 = &derived.n_k * &riccati.kk[0];
    let mu = &derived.init_mean_k;
    stated += mu.dot(&(&nk0 * mu)) + (&nk0 * &mean_cov).trace();
    Ok(finish(stated, noise_term(spec, riccati)))
}

/// Value averaged over sampled initial populations, each laid out `[agent][n]`.
pub fn value_function_sampled(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    riccati: &RiccatiSolution,
    samples: &[Vec<f64>],
) -> Result<ValueFunction> {
    check_grid(spec, riccati)?;
    let n = spec.state_dim;
    let agents = spec.total_agents();
    if samples.is_empty() || samples.iter().any(|s| s.len() != agents * n) {
        return Err(Error::Shape(format!(
            "initial samples must be non-empty with {} entries each",
            agents * n
        )));
    }
    let offsets = spec.cluster_offsets();
    let nk0 = &derived.n_k * &riccati.kk[0];
    let mut total = 0.0;
    for x0 in samples {
        let mut means = vec![0.0; n * spec.k()];
        crate::simulate::compute_means(spec, &offsets, x0, &mut means);
        for agent in 0..agents {
            let q = spec.cluster_of(agent).expect("agent in range");
            total += weighted_sq(&riccati.p[q][0], &x0[agent * n..(agent + 1) * n]);
        }
        let xk = DVector::from_vec(means);
        total += xk.dot(&(&nk0 * &xk));
    }
    Ok(finish(total / samples.len() as f64, noise_term(spec, riccati)))
}

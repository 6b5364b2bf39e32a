//! Brute-force ground truth for small populations.
//!
//! The whole population is written as one LQ problem in `X = (x_1, ..., x_N)`
//! and its Riccati equation is solved directly. The structured solution must
//! reproduce its gains, value and quadratic form. A second checker verifies
//! that the costate `lambda_i = P_q x_i + Kbar_q x^K` satisfies the backward
//! equation along simulated centralized trajectories.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::value_function;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, block_diag, symmetrize, trapezoid};
use crate::model::{DerivedMatrices, SystemSpec};
use crate::riccati::RiccatiSolution;
use crate::simulate::TrajectoryBundle;

/// Largest `N * n` the stacked solver accepts.
pub const SIZE_LIMIT: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Averaging map `X -> x^K` (`nK x Nn`).
    pub averaging: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub horizon: f64,
    pub steps: usize,
}

/// Expands the population agent by agent.
pub fn stack_system(spec: &SystemSpec, derived: &DerivedMatrices) -> Result<StackedSystem> {
    let n = spec.state_dim;
    let agents = spec.total_agents();
    let size = agents * n;
    if size > SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: SIZE_LIMIT,
        });
    }
    let k = spec.k();
    let offsets = spec.cluster_offsets();
    let cluster: Vec<usize> = (0..agents).map(|i| spec.cluster_of(i).expect("in range")).collect();

    let mut averaging = DMatrix::zeros(n * k, size);
    for (i, &q) in cluster.iter().enumerate() {
        let w = 1.0 / (offsets[q + 1] - offsets[q]) as f64;
        averaging
            .view_mut((q * n, i * n), (n, n))
            .copy_from(&(DMatrix::identity(n, n) * w));
    }

    let blocks = |f: &dyn Fn(usize) -> DMatrix<f64>| -> DMatrix<f64> {
        let mats: Vec<DMatrix<f64>> = cluster.iter().map(|&q| f(q)).collect();
        block_diag(&mats.iter().collect::<Vec<_>>())
    };
    let mut a = blocks(&|q| spec.clusters[q].a.clone());
    let b = blocks(&|q| spec.clusters[q].b.clone());
    let d = blocks(&|q| spec.clusters[q].sigma.clone());
    let r = blocks(&|q| spec.clusters[q].r.clone());

    let mut qq = DMatrix::zeros(size, size);
    let mut hh = DMatrix::zeros(size, size);
    let mut init_mean = DVector::zeros(size);
    let mut init_cov = DMatrix::zeros(size, size);
    for (i, &q) in cluster.iter().enumerate() {
        let c = &spec.clusters[q];
        let coupling = &derived.gbar[q] * &averaging;
        let mut rows = a.rows_mut(i * n, n);
        rows += coupling;
        // S_i = E_i - Gammabar_q M
        let mut s = -(&derived.gammabar[q] * &averaging);
        for j in 0..n {
            s[(j, i * n + j)] += 1.0;
        }
        qq += s.transpose() * &c.q * &s;
        hh += s.transpose() * &c.h * &s;
        init_mean.rows_mut(i * n, n).copy_from(&c.init_mean);
        init_cov.view_mut((i * n, i * n), (n, n)).copy_from(&c.init_cov);
    }
    symmetrize(&mut qq);
    symmetrize(&mut hh);
    Ok(StackedSystem {
        a,
        b,
        d,
        q: qq,
        r,
        h: hh,
        averaging,
        init_mean,
        init_cov,
        horizon: spec.horizon,
        steps: spec.steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedSolution {
    pub times: Vec<f64>,
    /// Stacked Riccati matrix at every node.
    pub p: Vec<DMatrix<f64>>,
    /// `E[X_0^T p(0) X_0]`.
    pub initial_term: f64,
    /// `∫ tr(D^T p D) dt`.
    pub noise_term: f64,
    pub value: f64,
}

/// Backward RK4 on the stacked Riccati equation `-p' = pA + A^T p + Q - p B R^{-1} B^T p`.
pub fn solve_stacked_riccati(stacked: &StackedSystem) -> Result<StackedSolution> {
    let steps = stacked.steps;
    let h = stacked.horizon / steps as f64;
    let r_inv = stacked
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::validation("R", "not invertible"))?;
    let s = &stacked.b * r_inv * stacked.b.transpose();
    let at = stacked.a.transpose();
    let rate = |p: &DMatrix<f64>| -> DMatrix<f64> {
        p * &stacked.a + &at * p + &stacked.q - p * &s * p
    };
    let mut p = vec![DMatrix::zeros(0, 0); steps + 1];
    p[steps] = stacked.h.clone();
    for k in (0..steps).rev() {
        let cur = &p[k + 1];
        let k1 = rate(cur);
        let k2 = rate(&(cur + &k1 * (0.5 * h)));
        let k3 = rate(&(cur + &k2 * (0.5 * h)));
        let k4 = rate(&(cur + &k3 * h));
        let mut next = cur + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        symmetrize(&mut next);
        if !all_finite(&next) {
            return Err(Error::SolverDivergence {
                equation: "stacked P".into(),
                time: k as f64 * h,
            });
        }
        p[k] = next;
    }
    let mu = &stacked.init_mean;
    let initial_term = mu.dot(&(&p[0] * mu)) + (&p[0] * &stacked.init_cov).trace();
    let traces: Vec<f64> = p
        .iter()
        .map(|pk| (stacked.d.transpose() * pk * &stacked.d).trace())
        .collect();
    let noise_term = trapezoid(&traces, h);
    Ok(StackedSolution {
        times: (0..=steps).map(|k| k as f64 * h).collect(),
        p,
        initial_term,
        noise_term,
        value: initial_term + noise_term,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    pub fn new(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            deviation,
            tolerance,
            pass: deviation.is_finite() && deviation <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tolerances of [`compare_structured_vs_stacked`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareTolerances {
    pub gain: f64,
    pub value: f64,
    pub quadratic: f64,
}

impl Default for CompareTolerances {
    fn default() -> Self {
        Self {
            gain: 1e-6,
            value: 1e-6,
            quadratic: 1e-6,
        }
    }
}

/// Number of grid nodes sampled by the gain and quadratic-form checks.
pub const SAMPLED_NODES: usize = 20;

fn sampled_nodes(steps: usize) -> Vec<usize> {
    let count = SAMPLED_NODES.min(steps + 1);
    let mut nodes: Vec<usize> = (0..count)
        .map(|j| ((j * steps) as f64 / (count - 1).max(1) as f64).round() as usize)
        .collect();
    nodes.dedup();
    nodes
}

/// Compares the structured solution against the stacked one on `trials`
/// random joint states at [`SAMPLED_NODES`] grid nodes.
#[allow(clippy::too_many_arguments)]
pub fn compare_structured_vs_stacked(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    riccati: &RiccatiSolution,
    stacked: &StackedSystem,
    solution: &StackedSolution,
    trials: usize,
    seed: u64,
    tol: CompareTolerances,
) -> Result<OracleReport> {
    if solution.p.len() != riccati.times.len() || stacked.steps != spec.steps {
        return Err(Error::GridMismatch(
            "structured and stacked solutions use different grids".into(),
        ));
    }
    let n = spec.state_dim;
    let agents = spec.total_agents();
    let size = agents * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_inv_bt = stacked
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::validation("R", "not invertible"))?
        * stacked.b.transpose();
    let (mut gain_dev, mut quad_dev) = (0.0_f64, 0.0_f64);
    for node in sampled_nodes(spec.steps) {
        let pk = &solution.p[node];
        let kk = &riccati.kk[node];
        let nk_kk = &derived.n_k * kk;
        for _ in 0..trials {
            let x = DVector::from_fn(size, |_, _| StandardNormal.sample(&mut rng));
            let xk = &stacked.averaging * &x;
            let u_stacked = -(&r_inv_bt * (pk * &x));
            let mut quad = xk.dot(&(&nk_kk * &xk));
            for i in 0..agents {
                let q = spec.cluster_of(i).expect("in range");
                let xi = x.rows(i * n, n);
                let lam = &riccati.p[q][node] * xi + kk.rows(q * n, n) * &xk;
                let u = -(&derived.r_inv_bt[q] * lam);
                let m = spec.control_dim;
                gain_dev = gain_dev.max((u - u_stacked.rows(i * m, m)).amax());
                quad += xi.dot(&(&riccati.p[q][node] * xi));
            }
            let reference = x.dot(&(pk * &x));
            quad_dev = quad_dev.max((quad - reference).abs() / reference.abs().max(1.0));
        }
    }
    let v = value_function(spec, derived, riccati)?;
    let value_dev = (v.corrected - solution.value).abs() / solution.value.abs().max(f64::MIN_POSITIVE);
    let value_dev = if v.corrected == solution.value { 0.0 } else { value_dev };
    Ok(OracleReport {
        checks: vec![
            OracleCheck::new("gain", gain_dev, tol.gain),
            OracleCheck::new("value", value_dev, tol.value),
            OracleCheck::new("quadratic-form", quad_dev, tol.quadratic),
        ],
    })
}

/// Residuals of the costate candidate along centralized trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbsdeResidual {
    /// `max |u_i + R^{-1} B^T lambda_i|`.
    pub control: f64,
    /// `max |lambda_i(T) - H x_i(T) + Hbar x^K(T)|`.
    pub terminal: f64,
    /// Largest per-step mismatch of the deterministic costate increment.
    pub drift: f64,
    pub step_size: f64,
}

impl FbsdeResidual {
    pub fn report(&self, exact_tol: f64, drift_factor: f64) -> OracleReport {
        OracleReport {
            checks: vec![
                OracleCheck::new("fbsde-control", self.control, exact_tol),
                OracleCheck::new("fbsde-terminal", self.terminal, exact_tol),
                OracleCheck::new(
                    "fbsde-drift",
                    self.drift,
                    drift_factor * self.step_size * self.step_size,
                ),
            ],
        }
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Checks `lambda_i = P_q x_i + Kbar_q x^K` against the costate equation
/// `-d lambda_i = [A_q^T lambda_i + D_q^T lambda^K + Q_q x_i - Qbar_q x^K] dt + ...`.
///
/// The drift check propagates each state one noise-free Euler step and
/// compares the resulting costate increment with the right-hand side.
pub fn fbsde_residual(
    bundle: &TrajectoryBundle,
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    riccati: &RiccatiSolution,
) -> Result<FbsdeResidual> {
    if bundle.steps != spec.steps || riccati.times.len() != spec.steps + 1 || bundle.agents != spec.total_agents()
    {
        return Err(Error::GridMismatch(
            "trajectories, spec and Riccati grid disagree".into(),
        ));
    }
    if !bundle.has_agents() {
        return Err(Error::MissingTrajectories);
    }
    let (n, k) = (spec.state_dim, spec.k());
    let agents = spec.total_agents();
    let h = spec.step_size();
    let offsets = spec.cluster_offsets();
    let kbar: Vec<Vec<DMatrix<f64>>> = (0..k)
        .map(|q| (0..=spec.steps).map(|t| riccati.kbar(q, t)).collect())
        .collect();
    let dq: Vec<DMatrix<f64>> = (0..k).map(|q| derived.d(q)).collect();
    let qbar: Vec<DMatrix<f64>> = (0..k).map(|q| derived.qbar(q)).collect();
    let hbar: Vec<DMatrix<f64>> = (0..k).map(|q| derived.hbar(q)).collect();
    let cluster: Vec<usize> = (0..agents).map(|i| spec.cluster_of(i).expect("in range")).collect();

    let costate = |node: usize, xs: &[DVector<f64>], xk: &DVector<f64>| -> Vec<DVector<f64>> {
        xs.iter()
            .zip(&cluster)
            .map(|(x, &q)| &riccati.p[q][node] * x + &kbar[q][node] * xk)
            .collect()
    };
    let averages = |vals: &[DVector<f64>]| -> DVector<f64> {
        let mut out = DVector::zeros(n * k);
        for q in 0..k {
            let mut acc = DVector::zeros(n);
            for v in &vals[offsets[q]..offsets[q + 1]] {
                acc += v;
            }
            out.rows_mut(q * n, n).copy_from(&(acc / (offsets[q + 1] - offsets[q]) as f64));
        }
        out
    };

    let (mut control, mut terminal, mut drift) = (0.0_f64, 0.0_f64, 0.0_f64);
    for path in 0..bundle.paths.len() {
        for step in 0..=spec.steps {
            let xs: Vec<DVector<f64>> = (0..agents)
                .map(|i| DVector::from_row_slice(bundle.state(path, step, i).expect("retained")))
                .collect();
            let xk = averages(&xs);
            let lam = costate(step, &xs, &xk);
            if step == spec.steps {
                for (i, &q) in cluster.iter().enumerate() {
                    let target = &spec.clusters[q].h * &xs[i] - &hbar[q] * &xk;
                    terminal = terminal.max(max_abs(&(&lam[i] - target)));
                }
                continue;
            }
            let us: Vec<DVector<f64>> = (0..agents)
                .map(|i| DVector::from_row_slice(bundle.control(path, step, i).expect("retained")))
                .collect();
            for (i, &q) in cluster.iter().enumerate() {
                let expect = -(&derived.r_inv_bt[q] * &lam[i]);
                control = control.max(max_abs(&(&us[i] - expect)));
            }
            let next: Vec<DVector<f64>> = cluster
                .iter()
                .enumerate()
                .map(|(i, &q)| {
                    let c = &spec.clusters[q];
                    &xs[i] + (&c.a * &xs[i] + &c.b * &us[i] + &derived.gbar[q] * &xk) * h
                })
                .collect();
            let xk_next = averages(&next);
            let lam_next = costate(step + 1, &next, &xk_next);
            let lam_k = averages(&lam);
            for (i, &q) in cluster.iter().enumerate() {
                let c = &spec.clusters[q];
                let rhs = c.a.transpose() * &lam[i] + dq[q].transpose() * &lam_k + &c.q * &xs[i]
                    - &qbar[q] * &xk;
                let residual = (&lam_next[i] - &lam[i]) + rhs * h;
                drift = drift.max(max_abs(&residual));
            }
        }
    }
    Ok(FbsdeResidual {
        control,
        terminal,
        drift,
        step_size: h,
    })
}

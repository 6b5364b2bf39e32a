//! Cluster mean-field estimators for the distributed controller.
//!
//! Cluster `q` keeps an estimate of the full stacked mean field. Blocks of
//! neighbor clusters are copied from observations; every other block `p`
//! integrates `d/dt xbar_p = Atilde_p xbar_p + Gtilde_p xbar` (explicit Euler
//! on the simulation grid) starting from the prior mean of cluster `p`.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::gemv_acc;
use crate::model::{DerivedMatrices, NetworkTopology, SystemSpec};
use crate::riccati::ClosedLoop;
use crate::simulate::TrajectoryBundle;

/// Guarded read access to realized cluster means on behalf of cluster `q`.
///
/// Reading a non-neighbor block is refused, and every read is logged so
/// tests can audit the information pattern.
pub struct NeighborView<'a> {
    q: usize,
    n: usize,
    topology: &'a NetworkTopology,
    means: &'a [f64],
    reads: RefCell<Vec<usize>>,
}

impl<'a> NeighborView<'a> {
    pub fn new(topology: &'a NetworkTopology, q: usize, n: usize, means: &'a [f64]) -> Self {
        Self {
            q,
            n,
            topology,
            means,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// `x^K_p` if cluster `q` communicates with `p`.
    pub fn observe(&self, p: usize) -> Result<&'a [f64]> {
        if !self.topology.communicates(self.q, p) {
            return Err(Error::Argument(format!(
                "cluster {} cannot observe cluster {p}",
                self.q
            )));
        }
        self.reads.borrow_mut().push(p);
        Ok(&self.means[p * self.n..(p + 1) * self.n])
    }

    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }
}

/// Estimate held by one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEstimator {
    q: usize,
    n: usize,
    k: usize,
    observed: Vec<bool>,
    state: Vec<f64>,
    scratch: Vec<f64>,
}

impl ClusterEstimator {
    /// Block `p` starts at the observed `x^K_p(0)` for neighbors, else at `mbar_p`.
    pub fn new(spec: &SystemSpec, q: usize, view: &NeighborView<'_>) -> Self {
        let (n, k) = (spec.state_dim, spec.k());
        let observed: Vec<bool> = (0..k).map(|p| spec.topology.communicates(q, p)).collect();
        let mut state = vec![0.0; n * k];
        for p in 0..k {
            let block = &mut state[p * n..(p + 1) * n];
            match observed[p] {
                true => block.copy_from_slice(view.observe(p).expect("neighbor is observable")),
                false => block.copy_from_slice(spec.clusters[p].init_mean.as_slice()),
            }
        }
        Self {
            q,
            n,
            k,
            observed,
            state,
            scratch: vec![0.0; n * k],
        }
    }

    pub fn cluster(&self) -> usize {
        self.q
    }

    /// Current `xbar^{K,q}`.
    pub fn estimate(&self) -> &[f64] {
        &self.state
    }

    /// Advances from node `node` to `node + 1`; `view` exposes the means at `node + 1`.
    pub fn step(
        &mut self,
        closed_loop: &ClosedLoop,
        node: usize,
        h: f64,
        view: &NeighborView<'_>,
    ) -> Result<()> {
        let n = self.n;
        for p in 0..self.k {
            let block = &mut self.scratch[p * n..(p + 1) * n];
            if self.observed[p] {
                block.copy_from_slice(view.observe(p)?);
                continue;
            }
            let own = &self.state[p * n..(p + 1) * n];
            let mut drift = vec![0.0; n];
            gemv_acc(&mut drift, &closed_loop.a_tilde[p][node], own, 1.0);
            gemv_acc(&mut drift, &closed_loop.g_tilde[p][node], &self.state, 1.0);
            for ((b, &x), &dr) in block.iter_mut().zip(own).zip(&drift) {
                *b = x + h * dr;
            }
        }
        if self.scratch.iter().any(|v| !v.is_finite()) {
            return Err(Error::EstimatorDivergence {
                path: 0,
                cluster: self.q,
                step: node + 1,
            });
        }
        std::mem::swap(&mut self.state, &mut self.scratch);
        Ok(())
    }
}

/// One estimator per cluster, initialized from the realized stacked means at time 0.
pub fn init_estimators(
    spec: &SystemSpec,
    _derived: &DerivedMatrices,
    means0: &[f64],
) -> Vec<ClusterEstimator> {
    (0..spec.k())
        .map(|q| {
            let view = NeighborView::new(&spec.topology, q, spec.state_dim, means0);
            ClusterEstimator::new(spec, q, &view)
        })
        .collect()
}

/// Advances all clusters' estimators by one step.
pub fn step_estimators(
    spec: &SystemSpec,
    closed_loop: &ClosedLoop,
    estimators: &mut [ClusterEstimator],
    node: usize,
    h: f64,
    means_next: &[f64],
) -> Result<()> {
    for est in estimators.iter_mut() {
        let view = NeighborView::new(&spec.topology, est.q, spec.state_dim, means_next);
        est.step(closed_loop, node, h, &view)?;
    }
    Ok(())
}

/// Estimates of every cluster along every path.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorTrace {
    pub k: usize,
    pub n: usize,
    pub steps: usize,
    /// Per path, `[(step * K + q) * nK + c]`.
    pub estimates: Vec<Vec<f64>>,
}

impl EstimatorTrace {
    pub fn new(spec: &SystemSpec, estimates: Vec<Vec<f64>>) -> Self {
        Self {
            k: spec.k(),
            n: spec.state_dim,
            steps: spec.steps,
            estimates,
        }
    }

    pub fn paths(&self) -> usize {
        self.estimates.len()
    }

    /// `xbar^{K,q}` at a step.
    pub fn estimate(&self, path: usize, step: usize, q: usize) -> &[f64] {
        let nk = self.n * self.k;
        let i = (step * self.k + q) * nk;
        &self.estimates[path][i..i + nk]
    }
}

/// Mean-square estimation errors averaged over paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationErrors {
    pub times: Vec<f64>,
    /// `E|x_check^K - xbar^{K,q}|^2`, `[cluster][step]`.
    pub check: Vec<Vec<f64>>,
    /// `E|x_hat^K - xbar^{K,q}|^2` when a centralized run was supplied.
    pub hat: Option<Vec<Vec<f64>>>,
    /// `sup_t sum_q E|x_check^K - xbar^{K,q}|^2`.
    pub sup_check: f64,
    pub sup_hat: Option<f64>,
    /// Per-cluster sup over time of the `check` series.
    pub sup_check_by_cluster: Vec<f64>,
    /// `sup_t E|x_check^K|^2`.
    pub sup_mean_field_sq: f64,
    /// `sup_t E|xbar^K|^2`, with `xbar^K` all clusters' estimates stacked.
    pub sup_estimate_sq: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn estimation_errors(
    distributed: &TrajectoryBundle,
    trace: &EstimatorTrace,
    centralized: Option<&TrajectoryBundle>,
) -> Result<EstimationErrors> {
    let (k, steps) = (distributed.k, distributed.steps);
    let paths = distributed.paths.len();
    if trace.paths() != paths || trace.steps != steps || trace.k != k || trace.n != distributed.n {
        return Err(Error::GridMismatch(
            "estimator trace does not match the distributed run".into(),
        ));
    }
    if let Some(c) = centralized {
        if c.paths.len() != paths || c.steps != steps || c.k != k || c.seed != distributed.seed {
            return Err(Error::GridMismatch(
                "centralized run does not share the distributed grid and noise".into(),
            ));
        }
    }
    let scale = 1.0 / paths as f64;
    let mut check = vec![vec![0.0; steps + 1]; k];
    let mut hat = centralized.map(|_| vec![vec![0.0; steps + 1]; k]);
    let mut mf_sq = vec![0.0; steps + 1];
    let mut est_sq = vec![0.0; steps + 1];
    for path in 0..paths {
        for step in 0..=steps {
            let xk = distributed.global_mean(path, step);
            mf_sq[step] += scale * xk.iter().map(|x| x * x).sum::<f64>();
            for q in 0..k {
                let est = trace.estimate(path, step, q);
                check[q][step] += scale * sq_dist(xk, est);
                est_sq[step] += scale * est.iter().map(|x| x * x).sum::<f64>();
                if let (Some(c), Some(hat)) = (centralized, hat.as_mut()) {
                    hat[q][step] += scale * sq_dist(c.global_mean(path, step), est);
                }
            }
        }
    }
    let total = |series: &[Vec<f64>]| {
        (0..=steps)
            .map(|s| series.iter().map(|row| row[s]).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let sup = |row: &[f64]| row.iter().copied().fold(0.0, f64::max);
    Ok(EstimationErrors {
        times: (0..=steps).map(|s| s as f64 * distributed.step_size).collect(),
        sup_check: total(&check),
        sup_hat: hat.as_deref().map(total),
        sup_check_by_cluster: check.iter().map(|r| sup(r)).collect(),
        sup_mean_field_sq: sup(&mf_sq),
        sup_estimate_sq: sup(&est_sq),
        check,
        hat,
    })
}

/// `sum_q |x_check^K - xbar^{K,q}|^2` on every path at one step.
pub fn path_error_samples(
    distributed: &TrajectoryBundle,
    trace: &EstimatorTrace,
    step: usize,
) -> Vec<f64> {
    (0..distributed.paths.len())
        .map(|path| {
            let xk = distributed.global_mean(path, step);
            (0..trace.k)
                .map(|q| sq_dist(xk, trace.estimate(path, step, q)))
                .sum()
        })
        .collect()
}

/// Step at which `sum_q E|x_check^K - xbar^{K,q}|^2` peaks.
pub fn peak_error_step(errors: &EstimationErrors) -> usize {
    let steps = errors.times.len();
    (0..steps)
        .map(|s| (s, errors.check.iter().map(|row| row[s]).sum::<f64>()))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScalarCluster;
    use crate::simulate::{draw_noise, simulate_coupled, simulate_distributed, SimOptions, SolvedSystem};
    use nalgebra::DMatrix;

    fn system(comm: &[f64], sigma: f64, var: f64) -> SolvedSystem {
        let base = |a: f64, mean: f64, count: usize| ScalarCluster {
            count,
            a,
            g: 0.5,
            gamma: 0.3,
            sigma,
            init_mean: mean,
            init_var: var,
            ..Default::default()
        };
        let k = (comm.len() as f64).sqrt() as usize;
        let clusters = (0..k)
            .map(|q| base(0.1 * q as f64 - 0.1, 1.0 - q as f64, 3 + q).into_cluster(&format!("c{q}")))
            .collect();
        let topo = NetworkTopology::new(
            DMatrix::from_row_slice(k, k, comm),
            DMatrix::from_fn(k, k, |i, j| 1.0 + 0.1 * (i + 2 * j) as f64),
        )
        .unwrap();
        SolvedSystem::new(SystemSpec::new(clusters, topo, 1.0, 60).unwrap()).unwrap()
    }

    #[test]
    fn initialization_follows_the_graph() {
        let sys = system(&[1.0, 0.0, 1.0, 1.0], 0.3, 0.5);
        let means0 = [0.25, -0.75];
        let est = init_estimators(&sys.spec, &sys.derived, &means0);
        assert_eq!(est[0].estimate(), &[0.25, 0.0]);
        assert_eq!(est[1].estimate(), &[0.25, -0.75]);
        let full = system(&[1.0; 4], 0.3, 0.5);
        let est = init_estimators(&full.spec, &full.derived, &means0);
        assert_eq!(est[0].estimate(), &means0);
        let empty = system(&[0.0; 4], 0.3, 0.5);
        let est = init_estimators(&empty.spec, &empty.derived, &means0);
        assert_eq!(est[1].estimate(), &[1.0, 0.0]);
    }

    #[test]
    fn neighbor_view_refuses_and_audits() {
        let sys = system(&[1.0, 0.0, 1.0, 1.0], 0.3, 0.5);
        let means = [1.0, 2.0];
        let view = NeighborView::new(&sys.spec.topology, 0, 1, &means);
        assert!(view.observe(1).is_err());
        assert_eq!(view.observe(0).unwrap(), &[1.0]);
        assert_eq!(view.reads(), vec![0]);
    }

    #[test]
    fn estimator_reads_only_neighbors() {
        let sys = system(&[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], 0.3, 0.5);
        let means = [0.1, 0.2, 0.3];
        for q in 0..3 {
            let view = NeighborView::new(&sys.spec.topology, q, 1, &means);
            let mut est = ClusterEstimator::new(&sys.spec, q, &view);
            let next = NeighborView::new(&sys.spec.topology, q, 1, &means);
            est.step(&sys.closed_loop, 0, 0.01, &next).unwrap();
            let allowed = sys.spec.topology.neighbor_set(q).unwrap();
            let mut reads = view.reads();
            reads.extend(next.reads());
            assert!(reads.iter().all(|p| allowed.contains(p)), "cluster {q} read {reads:?}");
        }
    }

    #[test]
    fn observed_blocks_carry_no_error() {
        let sys = system(&[1.0, 0.0, 1.0, 1.0], 0.4, 0.5);
        let noise = draw_noise(&sys.spec, 3, 17).unwrap();
        let (d, trace) = simulate_distributed(&sys, &noise, SimOptions::default()).unwrap();
        for path in 0..3 {
            for step in 0..=sys.spec.steps {
                let xk = d.global_mean(path, step);
                assert_eq!(trace.estimate(path, step, 0)[0], xk[0]);
                assert_eq!(trace.estimate(path, step, 1), xk);
            }
        }
        let errs = estimation_errors(&d, &trace, None).unwrap();
        assert!(errs.check[1].iter().all(|&e| e == 0.0));
        assert!(errs.sup_check > 0.0);
    }

    #[test]
    fn complete_graph_has_zero_error() {
        let sys = system(&[1.0; 4], 0.4, 0.5);
        let noise = draw_noise(&sys.spec, 2, 3).unwrap();
        let run = simulate_coupled(&sys, &noise, SimOptions::default()).unwrap();
        let errs = estimation_errors(&run.distributed, &run.estimator, Some(&run.centralized)).unwrap();
        assert_eq!(errs.sup_check, 0.0);
        assert_eq!(errs.sup_hat, Some(0.0));
    }

    #[test]
    fn deterministic_unobserved_block_tracks_reference_flow() {
        let sys = system(&[1.0, 0.0, 0.0, 1.0], 0.0, 0.0);
        let noise = draw_noise(&sys.spec, 1, 0).unwrap();
        let (d, trace) = simulate_distributed(&sys, &noise, SimOptions::default()).unwrap();
        // Independent explicit-Euler integration of the aggregate closed loop.
        let cl = &sys.closed_loop;
        let h = sys.spec.step_size();
        let mut x = nalgebra::DVector::from_vec(vec![1.0, 0.0]);
        for step in 0..sys.spec.steps {
            let mut next = x.clone();
            for p in 0..2 {
                let dr = &cl.a_tilde[p][step] * x.rows(p, 1) + &cl.g_tilde[p][step] * &x;
                next[p] = x[p] + h * dr[0];
            }
            x = next;
            let est = trace.estimate(0, step + 1, 0);
            assert!((est[1] - x[1]).abs() < 1e-12);
            assert!((d.global_mean(0, step + 1)[1] - x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_copies_itself() {
        let sys = system(&[1.0], 0.4, 0.5);
        let noise = draw_noise(&sys.spec, 1, 1).unwrap();
        let (d, trace) = simulate_distributed(&sys, &noise, SimOptions::default()).unwrap();
        for step in 0..=sys.spec.steps {
            assert_eq!(trace.estimate(0, step, 0), d.global_mean(0, step));
        }
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let sys = system(&[1.0, 0.0, 1.0, 1.0], 0.4, 0.5);
        let noise = draw_noise(&sys.spec, 2, 1).unwrap();
        let (d, mut trace) = simulate_distributed(&sys, &noise, SimOptions::default()).unwrap();
        trace.estimates.pop();
        assert!(matches!(estimation_errors(&d, &trace, None), Err(Error::GridMismatch(_))));
    }
}

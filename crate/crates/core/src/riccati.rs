//! Backward Riccati solves on the uniform simulation grid.
//!
//! `P_q` solves the standard LQ Riccati equation of cluster `q`:
//!
//! ```text
//! 0 = dP_q/dt + P_q A_q + A_q^T P_q + Q_q - P_q S_q P_q,   P_q(T) = H_q
//! ```
//!
//! and the coupled term `K^K` (`nK x nK`) solves
//!
//! ```text
//! 0 = dK/dt + (A + D)^T K + K (A + G) + P G + D^T P - Qbar
//!     - K S (P + K) - P S K,                              K(T) = -Hbar
//! ```
//!
//! with `A, G, D, S, P` the stacked `K`-cluster matrices and `S = B R^{-1} B^T`.
//! Both are integrated backward from `T` with classical RK4 at step
//! `h = T / steps`. `P` is symmetrized after every step; `K` is not symmetric
//! in general and is left alone.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, block_diag, max_asymmetry, symmetrize};
use crate::model::{DerivedMatrices, SystemSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    /// `P_q(t_k)` indexed `[cluster][node]`.
    pub p: Vec<Vec<DMatrix<f64>>>,
    /// `K^K(t_k)` indexed by node.
    pub kk: Vec<DMatrix<f64>>,
    /// Largest `|P - P^T|` seen before symmetrization, relative to `max |P|`.
    pub max_presym_asymmetry: f64,
    n: usize,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn clusters(&self) -> usize {
        self.p.len()
    }

    pub fn step_size(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Row block `q` of `K^K(t_k)` (`n x nK`).
    pub fn kbar(&self, q: usize, node: usize) -> DMatrix<f64> {
        self.kk[node].rows(q * self.n, self.n).into_owned()
    }

    /// Block-diagonal `P^K(t_k)`.
    pub fn p_stacked(&self, node: usize) -> DMatrix<f64> {
        let blocks: Vec<&DMatrix<f64>> = self.p.iter().map(|pq| &pq[node]).collect();
        block_diag(&blocks)
    }
}

fn grid(spec: &SystemSpec) -> Vec<f64> {
    (0..=spec.steps).map(|k| spec.time(k)).collect()
}

/// `-dP/dt = P A + A^T P + Q - P S P`.
fn p_rate(p: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let pa = p * a;
    let psp = p * s * p;
    &pa + pa.transpose() + q - psp
}

struct CoupledTerms {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    s: DMatrix<f64>,
    ad_t: DMatrix<f64>,
    ag: DMatrix<f64>,
    g: DMatrix<f64>,
    d_t: DMatrix<f64>,
    qbar: DMatrix<f64>,
}

impl CoupledTerms {
    fn new(derived: &DerivedMatrices) -> Self {
        Self {
            a: derived.a_k.clone(),
            q: derived.q_k.clone(),
            s: derived.s_k.clone(),
            ad_t: (&derived.a_k + &derived.d_k).transpose(),
            ag: &derived.a_k + &derived.g_k,
            g: derived.g_k.clone(),
            d_t: derived.d_k.transpose(),
            qbar: derived.qbar_k.clone(),
        }
    }

    /// `-dK/dt` given stacked `P` and `K`.
    fn k_rate(&self, p: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
        let pk = p + k;
        &self.ad_t * k + k * &self.ag + p * &self.g + &self.d_t * p
            - &self.qbar
            - k * &self.s * pk
            - p * &self.s * k
    }

    fn rates(&self, p: &DMatrix<f64>, k: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (p_rate(p, &self.a, &self.q, &self.s), self.k_rate(p, k))
    }
}

/// Per-cluster `P_q` on the grid, indexed `[cluster][node]`.
pub fn solve_p(spec: &SystemSpec, derived: &DerivedMatrices) -> Result<Vec<Vec<DMatrix<f64>>>> {
    solve_p_tracked(spec, derived).map(|(p, _)| p)
}

fn solve_p_tracked(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
) -> Result<(Vec<Vec<DMatrix<f64>>>, f64)> {
    let steps = spec.steps;
    let h = spec.step_size();
    let mut worst = 0.0_f64;
    let mut out = Vec::with_capacity(spec.k());
    for (qi, c) in spec.clusters.iter().enumerate() {
        let s = &derived.s[qi];
        let mut nodes = vec![DMatrix::zeros(0, 0); steps + 1];
        let mut p = c.h.clone();
        nodes[steps] = p.clone();
        for node in (0..steps).rev() {
            let k1 = p_rate(&p, &c.a, &c.q, s);
            let k2 = p_rate(&(&p + &k1 * (0.5 * h)), &c.a, &c.q, s);
            let k3 = p_rate(&(&p + &k2 * (0.5 * h)), &c.a, &c.q, s);
            let k4 = p_rate(&(&p + &k3 * h), &c.a, &c.q, s);
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if !all_finite(&p) {
                return Err(Error::SolverDivergence {
                    equation: format!("P, cluster {qi}"),
                    time: spec.time(node),
                });
            }
            let scale = p.amax();
            if scale > 0.0 {
                worst = worst.max(max_asymmetry(&p) / scale);
            }
            symmetrize(&mut p);
            nodes[node] = p.clone();
        }
        out.push(nodes);
    }
    Ok((out, worst))
}

/// `K^K` on the grid. `P` is integrated again jointly with `K` so that RK4
/// stage values of `P` are exact stage values rather than interpolants; the
/// supplied `p` only fixes the grid and terminal data.
pub fn solve_k(
    spec: &SystemSpec,
    derived: &DerivedMatrices,
    p: &[Vec<DMatrix<f64>>],
) -> Result<Vec<DMatrix<f64>>> {
    let steps = spec.steps;
    if p.len() != spec.k() || p.iter().any(|pq| pq.len() != steps + 1) {
        return Err(Error::GridMismatch(
            "P solution does not match the spec's grid".into(),
        ));
    }
    let h = spec.step_size();
    let terms = CoupledTerms::new(derived);
    let terminal: Vec<&DMatrix<f64>> = p.iter().map(|pq| &pq[steps]).collect();
    let mut pk = block_diag(&terminal);
    let mut kk = -&derived.hbar_k;
    let mut nodes = vec![DMatrix::zeros(0, 0); steps + 1];
    nodes[steps] = kk.clone();
    for node in (0..steps).rev() {
        let (p1, k1) = terms.rates(&pk, &kk);
        let (p2, k2) = terms.rates(&(&pk + &p1 * (0.5 * h)), &(&kk + &k1 * (0.5 * h)));
        let (p3, k3) = terms.rates(&(&pk + &p2 * (0.5 * h)), &(&kk + &k2 * (0.5 * h)));
        let (p4, k4) = terms.rates(&(&pk + &p3 * h), &(&kk + &k3 * h));
        pk += (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0);
        kk += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !all_finite(&kk) || !all_finite(&pk) {
            return Err(Error::SolverDivergence {
                equation: "K".into(),
                time: spec.time(node),
            });
        }
        symmetrize(&mut pk);
        nodes[node] = kk.clone();
    }
    Ok(nodes)
}

pub fn solve(spec: &SystemSpec, derived: &DerivedMatrices) -> Result<RiccatiSolution> {
    let (p, max_presym_asymmetry) = solve_p_tracked(spec, derived)?;
    let kk = solve_k(spec, derived, &p)?;
    Ok(RiccatiSolution {
        times: grid(spec),
        p,
        kk,
        max_presym_asymmetry,
        n: spec.state_dim,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiResidual {
    /// Max Frobenius residual of the `P_q` equations over clusters and interior nodes.
    pub p: f64,
    /// Max Frobenius residual of the per-cluster `Kbar_q` rows.
    pub k: f64,
}

/// Pointwise residuals at interior nodes, with centered differences for the
/// time derivative. The `K` check uses the per-cluster row form, so it is an
/// independent route from the stacked right-hand side used by [`solve_k`].
pub fn riccati_residual(
    solution: &RiccatiSolution,
    spec: &SystemSpec,
    derived: &DerivedMatrices,
) -> RiccatiResidual {
    let steps = solution.steps();
    let h = solution.step_size();
    let mut res = RiccatiResidual { p: 0.0, k: 0.0 };
    let ag = &derived.a_k + &derived.g_k;
    for node in 1..steps {
        let p_stack = solution.p_stacked(node);
        let kk = &solution.kk[node];
        let pk_sum = &p_stack + kk;
        for (q, c) in spec.clusters.iter().enumerate() {
            let p = &solution.p[q][node];
            let dp = (&solution.p[q][node + 1] - &solution.p[q][node - 1]) / (2.0 * h);
            let s = &derived.s[q];
            let r = dp + p * &c.a + c.a.transpose() * p + &c.q - p * s * p;
            res.p = res.p.max(r.norm());

            let kbar = solution.kbar(q, node);
            let dk = (solution.kbar(q, node + 1) - solution.kbar(q, node - 1)) / (2.0 * h);
            let d_t = derived.d(q).transpose();
            let r = dk + c.a.transpose() * &kbar + &d_t * kk + &kbar * &ag + p * &derived.gbar[q]
                + &d_t * &p_stack
                - &kbar * &derived.s_k * &pk_sum
                - derived.qbar(q)
                - p * s * &kbar;
            res.k = res.k.max(r.norm());
        }
    }
    res
}

/// Closed-loop matrices on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    /// `A_q - S_q P_q`, indexed `[cluster][node]`.
    pub a_tilde: Vec<Vec<DMatrix<f64>>>,
    /// `Gbar_q - S_q Kbar_q` (`n x nK`), indexed `[cluster][node]`.
    pub g_tilde: Vec<Vec<DMatrix<f64>>>,
    /// `diag(S_1 Kbar_1, ..., S_K Kbar_K)` (`nK x nK^2`), indexed by node.
    pub z_k: Vec<DMatrix<f64>>,
}

pub fn closed_loop_matrices(solution: &RiccatiSolution, derived: &DerivedMatrices) -> ClosedLoop {
    let k = derived.k;
    let nodes = solution.times.len();
    let mut a_tilde = vec![Vec::with_capacity(nodes); k];
    let mut g_tilde = vec![Vec::with_capacity(nodes); k];
    let mut z_k = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let mut z_blocks = Vec::with_capacity(k);
        for q in 0..k {
            let s = &derived.s[q];
            let a_q = derived
                .a_k
                .view((q * derived.n, q * derived.n), (derived.n, derived.n));
            let a = a_q.into_owned() - s * &solution.p[q][node];
            let sk = s * solution.kbar(q, node);
            a_tilde[q].push(a);
            g_tilde[q].push(&derived.gbar[q] - &sk);
            z_blocks.push(sk);
        }
        let refs: Vec<&DMatrix<f64>> = z_blocks.iter().collect();
        z_k.push(block_diag(&refs));
    }
    ClosedLoop {
        a_tilde,
        g_tilde,
        z_k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_matrices, NetworkTopology, ScalarCluster};

    fn single(c: ScalarCluster, steps: usize, horizon: f64) -> SystemSpec {
        let topo = NetworkTopology::complete(DMatrix::from_element(1, 1, 1.0)).unwrap();
        SystemSpec::new(vec![c.into_cluster("c")], topo, horizon, steps).unwrap()
    }

    fn tanh_instance(steps: usize) -> SystemSpec {
        single(ScalarCluster::default(), steps, 1.0)
    }

    fn coupled_pair(steps: usize) -> SystemSpec {
        let c1 = ScalarCluster {
            count: 2,
            a: 0.2,
            g: 0.8,
            gamma: 0.5,
            q: 1.0,
            r: 0.5,
            h: 0.7,
            ..Default::default()
        };
        let c2 = ScalarCluster {
            count: 3,
            a: -0.3,
            b: 0.6,
            g: -0.5,
            gamma: 0.9,
            q: 2.0,
            r: 1.5,
            h: 0.2,
            ..Default::default()
        };
        let topo = NetworkTopology::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.2]),
        )
        .unwrap();
        SystemSpec::new(
            vec![c1.into_cluster("c1"), c2.into_cluster("c2")],
            topo,
            1.0,
            steps,
        )
        .unwrap()
    }

    /// Reference RK4 for the scalar equation -dP/dt = 2aP + q - b^2 P^2 / r on a fine grid.
    fn scalar_reference(c: &ScalarCluster, horizon: f64, steps: usize) -> f64 {
        let f = |p: f64| 2.0 * c.a * p + c.q - c.b * c.b * p * p / c.r;
        let h = horizon / steps as f64;
        let mut p = c.h;
        for _ in 0..steps {
            let k1 = f(p);
            let k2 = f(p + 0.5 * h * k1);
            let k3 = f(p + 0.5 * h * k2);
            let k4 = f(p + h * k3);
            p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        p
    }

    #[test]
    fn scalar_tanh_closed_form() {
        let spec = tanh_instance(1000);
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        let p0 = sol.p[0][0][(0, 0)];
        assert!((p0 - 1.0_f64.tanh()).abs() < 1e-6, "P(0) = {p0}");
        let reference = scalar_reference(&ScalarCluster::default(), 1.0, 100_000);
        assert!((p0 - reference).abs() < 1e-10);
        // Intermediate node: P(t) = tanh(T - t).
        assert!((sol.p[0][500][(0, 0)] - 0.5_f64.tanh()).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_give_zero_p() {
        let c = ScalarCluster {
            q: 0.0,
            h: 0.0,
            a: 0.7,
            ..Default::default()
        };
        let spec = single(c, 50, 2.0);
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        assert!(sol.p[0].iter().all(|p| p[(0, 0)] == 0.0));
    }

    #[test]
    fn no_control_authority_is_linear_in_time() {
        let n = 2;
        let mut c = ScalarCluster::default().into_cluster("c");
        c.a = DMatrix::zeros(n, n);
        c.b = DMatrix::zeros(n, 1);
        c.g = DMatrix::zeros(n, n);
        c.gamma = DMatrix::zeros(n, n);
        c.sigma = DMatrix::zeros(n, 1);
        c.q = DMatrix::identity(n, n);
        c.h = DMatrix::identity(n, n);
        c.init_mean = nalgebra::DVector::zeros(n);
        c.init_cov = DMatrix::zeros(n, n);
        c.r = DMatrix::from_element(1, 1, 3.0);
        let topo = NetworkTopology::complete(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let spec = SystemSpec::new(vec![c], topo, 1.5, 30).unwrap();
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        for (node, &t) in sol.times.iter().enumerate() {
            let expect = DMatrix::<f64>::identity(n, n) * (1.0 + 1.5 - t);
            assert!((&sol.p[0][node] - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn terminal_conditions_are_exact() {
        let spec = coupled_pair(40);
        let d = derive_matrices(&spec);
        let sol = solve(&spec, &d).unwrap();
        for (q, c) in spec.clusters.iter().enumerate() {
            assert_eq!(sol.p[q][40], c.h);
        }
        assert_eq!(sol.kk[40], -&d.hbar_k);
        // Row block extraction is a plain copy.
        for q in 0..2 {
            for node in [0, 17, 40] {
                assert_eq!(sol.kbar(q, node), sol.kk[node].rows(q, 1).into_owned());
            }
        }
    }

    #[test]
    fn p_stays_symmetric_and_psd() {
        let mut c = ScalarCluster::default().into_cluster("c");
        c.a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.5, 0.3]);
        c.b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        c.g = DMatrix::zeros(2, 2);
        c.gamma = DMatrix::zeros(2, 2);
        c.sigma = DMatrix::from_row_slice(2, 1, &[0.1, 0.2]);
        c.q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        c.h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        c.init_mean = nalgebra::DVector::zeros(2);
        c.init_cov = DMatrix::zeros(2, 2);
        let topo = NetworkTopology::complete(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let spec = SystemSpec::new(vec![c], topo, 2.0, 200).unwrap();
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        assert!(sol.max_presym_asymmetry <= 1e-9);
        for p in &sol.p[0] {
            assert!(max_asymmetry(p) <= 1e-10);
            assert!(crate::linalg::min_eigenvalue(p) >= -1e-10);
        }
    }

    #[test]
    fn k_vanishes_without_coupling() {
        let mut spec = coupled_pair(20);
        for c in &mut spec.clusters {
            c.g.fill(0.0);
            c.gamma.fill(0.0);
        }
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        assert!(sol.kk.iter().all(|k| k.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn k_self_convergence() {
        let coarse = coupled_pair(200);
        let fine = coupled_pair(2000);
        let kc = solve(&coarse, &derive_matrices(&coarse)).unwrap();
        let kf = solve(&fine, &derive_matrices(&fine)).unwrap();
        let dev = (&kc.kk[0] - &kf.kk[0]).amax();
        assert!(dev < 1e-8, "K(0) deviation {dev}");
        assert!(kc.kk[0].amax() > 1e-2, "instance should be non-trivial");
    }

    #[test]
    fn step_halving_is_fourth_order() {
        let at = |steps| {
            let s = coupled_pair(steps);
            solve(&s, &derive_matrices(&s)).unwrap()
        };
        let (a, b, c) = (at(10), at(20), at(40));
        let e1 = (&a.kk[0] - &c.kk[0]).amax();
        let e2 = (&b.kk[0] - &c.kk[0]).amax();
        // (e_h - e_{h/4}) / (e_{h/2} - e_{h/4}) = (1 - 1/16) / (1/16 - 1/256) ≈ 17 for order 4.
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 22.0, "ratio {ratio}");
    }

    #[test]
    fn residual_floor_and_order() {
        let spec = tanh_instance(1000);
        let d = derive_matrices(&spec);
        let r1 = riccati_residual(&solve(&spec, &d).unwrap(), &spec, &d);
        assert!(r1.p <= 1e-4, "residual {}", r1.p);
        let spec2 = tanh_instance(2000);
        let r2 = riccati_residual(&solve(&spec2, &d).unwrap(), &spec2, &d);
        let ratio = r1.p / r2.p;
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");

        let spec = coupled_pair(400);
        let d = derive_matrices(&spec);
        let r = riccati_residual(&solve(&spec, &d).unwrap(), &spec, &d);
        assert!(r.k < 1e-4 && r.p < 1e-4, "{r:?}");
    }

    #[test]
    fn residual_of_zero_instance_is_zero() {
        let mut spec = coupled_pair(30);
        for c in &mut spec.clusters {
            c.g.fill(0.0);
            c.gamma.fill(0.0);
            c.q.fill(0.0);
            c.h.fill(0.0);
        }
        let d = derive_matrices(&spec);
        let r = riccati_residual(&solve(&spec, &d).unwrap(), &spec, &d);
        assert_eq!(r, RiccatiResidual { p: 0.0, k: 0.0 });
    }

    #[test]
    fn p_decouples_across_clusters() {
        let spec = coupled_pair(50);
        let sol = solve(&spec, &derive_matrices(&spec)).unwrap();
        let mut other = spec.clone();
        other.clusters[1].a[(0, 0)] = 4.0;
        other.clusters[1].q[(0, 0)] = 0.1;
        other.clusters[1].g[(0, 0)] = 7.0;
        let sol2 = solve(&other, &derive_matrices(&other)).unwrap();
        assert_eq!(sol.p[0], sol2.p[0]);
    }

    #[test]
    fn closed_loop_special_cases() {
        let spec = coupled_pair(10);
        let d = derive_matrices(&spec);
        let sol = solve(&spec, &d).unwrap();
        let cl = closed_loop_matrices(&sol, &d);
        for q in 0..2 {
            let c = &spec.clusters[q];
            let (a, b, r) = (c.a[(0, 0)], c.b[(0, 0)], c.r[(0, 0)]);
            for node in [0, 5, 10] {
                let p = sol.p[q][node][(0, 0)];
                let expect = a - b * b * p / r;
                assert!((cl.a_tilde[q][node][(0, 0)] - expect).abs() < 1e-14);
            }
        }
        assert_eq!(cl.z_k[0].shape(), (2, 4));

        let mut zero = spec.clone();
        for c in &mut zero.clusters {
            c.g.fill(0.0);
            c.gamma.fill(0.0);
            c.q.fill(0.0);
            c.h.fill(0.0);
        }
        let d = derive_matrices(&zero);
        let sol = solve(&zero, &d).unwrap();
        let cl = closed_loop_matrices(&sol, &d);
        for q in 0..2 {
            assert_eq!(cl.a_tilde[q][3], zero.clusters[q].a);
            assert_eq!(cl.g_tilde[q][3], d.gbar[q]);
        }
        assert!(cl.z_k[3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        // Two RK4 steps of a wildly unstable drift overflow to infinity.
        let c = ScalarCluster {
            a: 1e100,
            b: 0.0,
            q: 1.0,
            ..Default::default()
        };
        let spec = single(c, 2, 10.0);
        match solve(&spec, &derive_matrices(&spec)) {
            Err(Error::SolverDivergence { equation, .. }) => assert!(equation.contains("P")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

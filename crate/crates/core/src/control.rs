//! Centralized and distributed feedback laws.
//!
//! Both laws share one kernel, `u = -F_q x_i - Fbar_q y`, where
//! `F_q = R_q^{-1} B_q^T P_q` and `Fbar_q = R_q^{-1} B_q^T Kbar_q`. The
//! centralized law feeds the realized global mean field as `y`; the
//! distributed law feeds the cluster's own estimate of it.

use nalgebra::{DMatrix, DVector};

use crate::linalg::gemv_acc;
use crate::model::DerivedMatrices;
use crate::riccati::RiccatiSolution;

/// Feedback gains precomputed at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    /// `F_q(t_k)` (`m x n`), indexed `[cluster][node]`.
    pub own: Vec<Vec<DMatrix<f64>>>,
    /// `Fbar_q(t_k)` (`m x nK`), indexed `[cluster][node]`.
    pub mean: Vec<Vec<DMatrix<f64>>>,
    n: usize,
    m: usize,
}

impl GainSchedule {
    pub fn new(riccati: &RiccatiSolution, derived: &DerivedMatrices) -> Self {
        let nodes = riccati.times.len();
        let mut own = Vec::with_capacity(derived.k);
        let mut mean = Vec::with_capacity(derived.k);
        for q in 0..derived.k {
            let rib = &derived.r_inv_bt[q];
            own.push((0..nodes).map(|t| rib * &riccati.p[q][t]).collect());
            mean.push((0..nodes).map(|t| rib * riccati.kbar(q, t)).collect());
        }
        Self {
            own,
            mean,
            n: derived.n,
            m: derived.m,
        }
    }

    pub fn nodes(&self) -> usize {
        self.own.first().map_or(0, Vec::len)
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// `out = Fbar_q(t_k) y`.
    #[inline]
    pub(crate) fn mean_term(&self, q: usize, node: usize, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        gemv_acc(out, &self.mean[q][node], y, 1.0);
    }

    /// `out = -F_q(t_k) x - mean_term`.
    #[inline]
    pub(crate) fn finish(
        &self,
        q: usize,
        node: usize,
        x: &[f64],
        mean_term: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
        gemv_acc(out, &self.own[q][node], x, 1.0);
        for (o, &w) in out.iter_mut().zip(mean_term) {
            *o = -*o - w;
        }
    }

    /// Shared kernel of every feedback law: `-F_q x - Fbar_q y`.
    pub fn feedback(&self, q: usize, node: usize, x: &[f64], y: &[f64]) -> DVector<f64> {
        let mut w = vec![0.0; self.m];
        let mut out = vec![0.0; self.m];
        self.mean_term(q, node, y, &mut w);
        self.finish(q, node, x, &w, &mut out);
        DVector::from_vec(out)
    }
}

/// Optimal centralized control of an agent in cluster `q` with state `x_i`,
/// given the realized global mean field `x^K`.
pub fn centralized_control(
    gains: &GainSchedule,
    q: usize,
    x_i: &DVector<f64>,
    xk: &DVector<f64>,
    node: usize,
) -> DVector<f64> {
    gains.feedback(q, node, x_i.as_slice(), xk.as_slice())
}

/// Distributed control: own state plus cluster `q`'s estimate of `x^K`.
pub fn distributed_control(
    gains: &GainSchedule,
    q: usize,
    x_i: &DVector<f64>,
    estimate: &DVector<f64>,
    node: usize,
) -> DVector<f64> {
    gains.feedback(q, node, x_i.as_slice(), estimate.as_slice())
}

/// Average distributed control of cluster `q`, evaluated at the cluster mean.
pub fn average_cluster_control(
    gains: &GainSchedule,
    q: usize,
    xk_q: &DVector<f64>,
    estimate: &DVector<f64>,
    node: usize,
) -> DVector<f64> {
    gains.feedback(q, node, xk_q.as_slice(), estimate.as_slice())
}

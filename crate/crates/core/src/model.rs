//! Problem instance: clusters, communication topology, horizon and the
//! matrices derived from them.
//!
//! Agents are laid out cluster by cluster: cluster 0 owns agents
//! `0..N_0`, cluster 1 the next `N_1`, and so on. Cluster indices are
//! zero-based throughout the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, max_asymmetry, min_eigenvalue, psd_sqrt, stack_rows};

const SYM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub label: String,
    pub count: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

/// Scalar (`n = m = d_w = 1`) cluster parameters, mostly for tests and presets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCluster {
    pub count: usize,
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub q: f64,
    pub r: f64,
    pub h: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

impl Default for ScalarCluster {
    fn default() -> Self {
        Self {
            count: 1,
            a: 0.0,
            b: 1.0,
            g: 0.0,
            sigma: 0.0,
            gamma: 0.0,
            q: 1.0,
            r: 1.0,
            h: 0.0,
            init_mean: 0.0,
            init_var: 0.0,
        }
    }
}

impl ScalarCluster {
    pub fn into_cluster(self, label: &str) -> ClusterSpec {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        ClusterSpec {
            label: label.to_string(),
            count: self.count,
            a: s(self.a),
            b: s(self.b),
            g: s(self.g),
            sigma: s(self.sigma),
            gamma: s(self.gamma),
            q: s(self.q),
            r: s(self.r),
            h: s(self.h),
            init_mean: DVector::from_element(1, self.init_mean),
            init_cov: s(self.init_var),
        }
    }
}

/// Communication matrix `E` (0/1) and coupling weights `M`, both `K x K`.
///
/// `E[(q, p)] = 1` means cluster `q` receives cluster `p`'s mean field.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    comm: Vec<bool>,
    weights: DMatrix<f64>,
}

impl NetworkTopology {
    pub fn new(comm: DMatrix<f64>, weights: DMatrix<f64>) -> Result<Self> {
        let k = comm.nrows();
        if k == 0 || comm.ncols() != k {
            return Err(Error::validation("topology.E", "must be a non-empty square matrix"));
        }
        if weights.shape() != (k, k) {
            return Err(Error::validation(
                "topology.M",
                format!("expected {k}x{k}, got {}x{}", weights.nrows(), weights.ncols()),
            ));
        }
        if let Some(bad) = weights.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation("topology.M", format!("non-finite entry {bad}")));
        }
        let mut flags = Vec::with_capacity(k * k);
        for q in 0..k {
            for p in 0..k {
                let v = comm[(q, p)];
                if v == 0.0 {
                    flags.push(false);
                } else if v == 1.0 {
                    flags.push(true);
                } else {
                    return Err(Error::validation(
                        format!("topology.E[{q}][{p}]"),
                        format!("entries must be 0 or 1, got {v}"),
                    ));
                }
            }
        }
        Ok(Self {
            comm: flags,
            weights,
        })
    }

    /// Every cluster observes every other cluster.
    pub fn complete(weights: DMatrix<f64>) -> Result<Self> {
        let k = weights.nrows();
        Self::new(DMatrix::from_element(k, k, 1.0), weights)
    }

    pub fn clusters(&self) -> usize {
        self.weights.nrows()
    }

    pub fn communicates(&self, q: usize, p: usize) -> bool {
        self.comm[q * self.clusters() + p]
    }

    pub fn weight(&self, q: usize, p: usize) -> f64 {
        self.weights[(q, p)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn comm_matrix(&self) -> DMatrix<f64> {
        let k = self.clusters();
        DMatrix::from_fn(k, k, |q, p| if self.communicates(q, p) { 1.0 } else { 0.0 })
    }

    /// `{p : E[q][p] = 1}` in ascending order.
    pub fn neighbor_set(&self, q: usize) -> Result<Vec<usize>> {
        let k = self.clusters();
        if q >= k {
            return Err(Error::ClusterIndex {
                index: q,
                clusters: k,
            });
        }
        Ok((0..k).filter(|&p| self.communicates(q, p)).collect())
    }

    pub fn is_complete(&self) -> bool {
        self.comm.iter().all(|&e| e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub clusters: Vec<ClusterSpec>,
    pub topology: NetworkTopology,
    pub horizon: f64,
    pub steps: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
}

impl SystemSpec {
    /// Builds and validates an instance; dimensions are taken from the first cluster.
    pub fn new(
        clusters: Vec<ClusterSpec>,
        topology: NetworkTopology,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::validation("clusters", "at least one cluster is required"))?;
        let spec = Self {
            state_dim: first.a.nrows(),
            control_dim: first.b.ncols(),
            noise_dim: first.sigma.ncols(),
            clusters,
            topology,
            horizon,
            steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        raw.into_spec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawConfig::from(self)).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, dw) = (self.state_dim, self.control_dim, self.noise_dim);
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::validation("horizon", "must be a positive finite number"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        for (name, d) in [("state_dim", n), ("control_dim", m), ("noise_dim", dw)] {
            if d == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.clusters.is_empty() {
            return Err(Error::validation("clusters", "at least one cluster is required"));
        }
        if self.clusters.len() != self.topology.clusters() {
            return Err(Error::validation(
                "topology",
                format!(
                    "{} clusters configured but E/M are {}x{}",
                    self.clusters.len(),
                    self.topology.clusters(),
                    self.topology.clusters()
                ),
            ));
        }
        for (q, c) in self.clusters.iter().enumerate() {
            let field = |name: &str| format!("clusters[{q}].{name}");
            if c.count == 0 {
                return Err(Error::validation(field("count"), "must be at least 1"));
            }
            let shapes: [(&str, &DMatrix<f64>, (usize, usize)); 9] = [
                ("A", &c.a, (n, n)),
                ("B", &c.b, (n, m)),
                ("G", &c.g, (n, n)),
                ("Sigma", &c.sigma, (n, dw)),
                ("Gamma", &c.gamma, (n, n)),
                ("Q", &c.q, (n, n)),
                ("R", &c.r, (m, m)),
                ("H", &c.h, (n, n)),
                ("init_cov", &c.init_cov, (n, n)),
            ];
            for (name, mat, shape) in shapes {
                if mat.shape() != shape {
                    return Err(Error::validation(
                        field(name),
                        format!(
                            "expected {}x{}, got {}x{}",
                            shape.0,
                            shape.1,
                            mat.nrows(),
                            mat.ncols()
                        ),
                    ));
                }
                if mat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(field(name), "non-finite entry"));
                }
            }
            if c.init_mean.len() != n || c.init_mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    field("init_mean"),
                    format!("expected a finite vector of length {n}"),
                ));
            }
            for (name, mat) in [("Q", &c.q), ("H", &c.h), ("init_cov", &c.init_cov)] {
                let scale = mat.amax().max(1.0);
                if max_asymmetry(mat) > SYM_TOL * scale {
                    return Err(Error::validation(field(name), "not symmetric"));
                }
                if min_eigenvalue(mat) < -SYM_TOL * scale {
                    return Err(Error::validation(field(name), "not positive semidefinite"));
                }
            }
            if max_asymmetry(&c.r) > SYM_TOL * c.r.amax().max(1.0) {
                return Err(Error::validation(field("R"), "not symmetric"));
            }
            if min_eigenvalue(&c.r) <= 0.0 {
                return Err(Error::validation(field("R"), "R not positive definite"));
            }
        }
        Ok(())
    }

    /// Non-fatal configuration remarks (coupling on edges without communication).
    pub fn warnings(&self) -> Vec<String> {
        let k = self.k();
        let mut out = Vec::new();
        for q in 0..k {
            for p in 0..k {
                if self.topology.weight(q, p) != 0.0 && !self.topology.communicates(q, p) {
                    out.push(format!(
                        "M[{q}][{p}] = {} couples cluster {q} to cluster {p} but E[{q}][{p}] = 0; \
                         cluster {q} must estimate that mean field",
                        self.topology.weight(q, p)
                    ));
                }
            }
        }
        out
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn total_agents(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }

    /// First agent index of each cluster, plus the total as a final entry.
    pub fn cluster_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.k() + 1);
        let mut acc = 0;
        offsets.push(0);
        for c in &self.clusters {
            acc += c.count;
            offsets.push(acc);
        }
        offsets
    }

    pub fn cluster_of(&self, agent: usize) -> Option<usize> {
        let offsets = self.cluster_offsets();
        (0..self.k()).find(|&q| agent >= offsets[q] && agent < offsets[q + 1])
    }

    /// `pi_q = N_q / N`.
    pub fn population_weights(&self) -> Vec<f64> {
        let total = self.total_agents() as f64;
        self.clusters.iter().map(|c| c.count as f64 / total).collect()
    }

    /// `C_1 = min_q N_q`.
    pub fn min_cluster_size(&self) -> usize {
        self.clusters.iter().map(|c| c.count).min().unwrap_or(0)
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut out = self.clone();
        out.steps = steps;
        out.validate()?;
        Ok(out)
    }

    pub fn with_counts(&self, counts: &[usize]) -> Result<Self> {
        if counts.len() != self.k() {
            return Err(Error::Argument(format!(
                "expected {} cluster counts, got {}",
                self.k(),
                counts.len()
            )));
        }
        let mut out = self.clone();
        for (c, &n) in out.clusters.iter_mut().zip(counts) {
            c.count = n;
        }
        out.validate()?;
        Ok(out)
    }

    /// Multiplies every `N_q` by `factor`.
    pub fn scaled(&self, factor: usize) -> Result<Self> {
        let counts: Vec<usize> = self.clusters.iter().map(|c| c.count * factor).collect();
        self.with_counts(&counts)
    }
}

/// Matrices defined by notation from a [`SystemSpec`]; see [`derive_matrices`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedMatrices {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub d_w: usize,
    /// `(M_q / K) ⊗ G_q`, `n x nK` per cluster.
    pub gbar: Vec<DMatrix<f64>>,
    /// `(M_q / K) ⊗ Gamma_q`, `n x nK` per cluster.
    pub gammabar: Vec<DMatrix<f64>>,
    pub pi_k: DMatrix<f64>,
    pub n_k: DMatrix<f64>,
    pub n_k_inv: DMatrix<f64>,
    pub g_k: DMatrix<f64>,
    pub gamma_k: DMatrix<f64>,
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub q_k: DMatrix<f64>,
    pub r_k: DMatrix<f64>,
    pub h_k: DMatrix<f64>,
    pub sigma_k: DMatrix<f64>,
    /// `N^K G^K (N^K)^{-1}`.
    pub d_k: DMatrix<f64>,
    pub qbar_k: DMatrix<f64>,
    pub hbar_k: DMatrix<f64>,
    /// Block-diagonal `B_q R_q^{-1} B_q^T`.
    pub s_k: DMatrix<f64>,
    /// `R_q^{-1} B_q^T`, `m x n` per cluster.
    pub r_inv_bt: Vec<DMatrix<f64>>,
    /// `B_q R_q^{-1} B_q^T`, `n x n` per cluster.
    pub s: Vec<DMatrix<f64>>,
    /// Observed-block selector `E^K_q` (length `nK`, entries 0/1).
    pub observed_mask: Vec<DVector<f64>>,
    /// Complement selector `Ebar^K_q`.
    pub unobserved_mask: Vec<DVector<f64>>,
    /// Stacked initial means `vec(m_1, ..., m_K)`.
    pub init_mean_k: DVector<f64>,
    /// Symmetric square roots of the initial covariances.
    pub init_sqrt: Vec<DMatrix<f64>>,
}

impl DerivedMatrices {
    /// Row block `q` (`n` rows) of an `nK`-row matrix.
    pub fn row_block(&self, mat: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
        mat.rows(q * self.n, self.n).into_owned()
    }

    /// Column block `q` (`n` columns) of an `nK`-column matrix.
    pub fn col_block(&self, mat: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
        mat.columns(q * self.n, self.n).into_owned()
    }

    pub fn qbar(&self, q: usize) -> DMatrix<f64> {
        self.row_block(&self.qbar_k, q)
    }

    pub fn hbar(&self, q: usize) -> DMatrix<f64> {
        self.row_block(&self.hbar_k, q)
    }

    /// Column block `D_q` of `D^K` (`nK x n`).
    pub fn d(&self, q: usize) -> DMatrix<f64> {
        self.col_block(&self.d_k, q)
    }
}

pub fn derive_matrices(spec: &SystemSpec) -> DerivedMatrices {
    let k = spec.k();
    let (n, m, d_w) = (spec.state_dim, spec.control_dim, spec.noise_dim);
    let nk = n * k;
    let kf = k as f64;

    let mut gbar = Vec::with_capacity(k);
    let mut gammabar = Vec::with_capacity(k);
    for (q, c) in spec.clusters.iter().enumerate() {
        let row = DMatrix::from_fn(1, k, |_, p| spec.topology.weight(q, p) / kf);
        gbar.push(row.kronecker(&c.g));
        gammabar.push(row.kronecker(&c.gamma));
    }

    let pis = spec.population_weights();
    let scalar_blocks = |vals: &[f64]| {
        DMatrix::from_fn(nk, nk, |i, j| if i == j { vals[i / n] } else { 0.0 })
    };
    let counts: Vec<f64> = spec.clusters.iter().map(|c| c.count as f64).collect();
    let inv_counts: Vec<f64> = counts.iter().map(|c| 1.0 / c).collect();
    let pi_k = scalar_blocks(&pis);
    let n_k = scalar_blocks(&counts);
    let n_k_inv = scalar_blocks(&inv_counts);

    let diag_of = |f: &dyn Fn(&ClusterSpec) -> &DMatrix<f64>| {
        let blocks: Vec<&DMatrix<f64>> = spec.clusters.iter().map(f).collect();
        block_diag(&blocks)
    };
    let a_k = diag_of(&|c| &c.a);
    let b_k = diag_of(&|c| &c.b);
    let q_k = diag_of(&|c| &c.q);
    let r_k = diag_of(&|c| &c.r);
    let h_k = diag_of(&|c| &c.h);
    let sigma_k = diag_of(&|c| &c.sigma);

    let g_k = stack_rows(&gbar);
    let gamma_k = stack_rows(&gammabar);
    let d_k = &n_k * &g_k * &n_k_inv;

    let coupled_weight = |w_k: &DMatrix<f64>| {
        let gt = gamma_k.transpose();
        w_k * &gamma_k + &n_k_inv * &gt * w_k * &n_k - &n_k_inv * &gt * &n_k * w_k * &gamma_k
    };
    let qbar_k = coupled_weight(&q_k);
    let hbar_k = coupled_weight(&h_k);

    let mut r_inv_bt = Vec::with_capacity(k);
    let mut s = Vec::with_capacity(k);
    for c in &spec.clusters {
        let r_inv = c
            .r
            .clone()
            .cholesky()
            .expect("validated R is positive definite")
            .inverse();
        let rib = r_inv * c.b.transpose();
        s.push(&c.b * &rib);
        r_inv_bt.push(rib);
    }
    let s_refs: Vec<&DMatrix<f64>> = s.iter().collect();
    let s_k = block_diag(&s_refs);

    let mut observed_mask = Vec::with_capacity(k);
    let mut unobserved_mask = Vec::with_capacity(k);
    for q in 0..k {
        let e = DVector::from_fn(nk, |i, _| {
            if spec.topology.communicates(q, i / n) {
                1.0
            } else {
                0.0
            }
        });
        unobserved_mask.push(e.map(|v| 1.0 - v));
        observed_mask.push(e);
    }

    let mut init_mean_k = DVector::zeros(nk);
    for (q, c) in spec.clusters.iter().enumerate() {
        init_mean_k.rows_mut(q * n, n).copy_from(&c.init_mean);
    }
    let init_sqrt = spec.clusters.iter().map(|c| psd_sqrt(&c.init_cov)).collect();

    DerivedMatrices {
        k,
        n,
        m,
        d_w,
        gbar,
        gammabar,
        pi_k,
        n_k,
        n_k_inv,
        g_k,
        gamma_k,
        a_k,
        b_k,
        q_k,
        r_k,
        h_k,
        sigma_k,
        d_k,
        qbar_k,
        hbar_k,
        s_k,
        r_inv_bt,
        s,
        observed_mask,
        unobserved_mask,
        init_mean_k,
        init_sqrt,
    }
}

/// `{p : E[q][p] = 1}`; free-function form of [`NetworkTopology::neighbor_set`].
pub fn neighbor_set(topology: &NetworkTopology, q: usize) -> Result<Vec<usize>> {
    topology.neighbor_set(q)
}

// JSON config. Matrices are nested row arrays.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    horizon: f64,
    steps: usize,
    state_dim: usize,
    control_dim: usize,
    noise_dim: usize,
    clusters: Vec<RawCluster>,
    topology: RawTopology,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    label: String,
    count: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    sigma: Vec<Vec<f64>>,
    #[serde(rename = "Gamma")]
    gamma: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    init_mean: Vec<f64>,
    init_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::validation(field, "empty matrix"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::validation(
            field,
            format!("row {i} has {} entries, expected {ncols}", rows[i].len()),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl RawConfig {
    fn into_spec(self) -> Result<SystemSpec> {
        let mut clusters = Vec::with_capacity(self.clusters.len());
        for (q, c) in self.clusters.into_iter().enumerate() {
            let f = |name: &str| format!("clusters[{q}].{name}");
            clusters.push(ClusterSpec {
                count: c.count,
                a: matrix(&f("A"), &c.a)?,
                b: matrix(&f("B"), &c.b)?,
                g: matrix(&f("G"), &c.g)?,
                sigma: matrix(&f("Sigma"), &c.sigma)?,
                gamma: matrix(&f("Gamma"), &c.gamma)?,
                q: matrix(&f("Q"), &c.q)?,
                r: matrix(&f("R"), &c.r)?,
                h: matrix(&f("H"), &c.h)?,
                init_mean: DVector::from_vec(c.init_mean),
                init_cov: matrix(&f("init_cov"), &c.init_cov)?,
                label: c.label,
            });
        }
        let topology = NetworkTopology::new(
            matrix("topology.E", &self.topology.e)?,
            matrix("topology.M", &self.topology.m)?,
        )?;
        let spec = SystemSpec {
            clusters,
            topology,
            horizon: self.horizon,
            steps: self.steps,
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            noise_dim: self.noise_dim,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<&SystemSpec> for RawConfig {
    fn from(spec: &SystemSpec) -> Self {
        RawConfig {
            horizon: spec.horizon,
            steps: spec.steps,
            state_dim: spec.state_dim,
            control_dim: spec.control_dim,
            noise_dim: spec.noise_dim,
            clusters: spec
                .clusters
                .iter()
                .map(|c| RawCluster {
                    label: c.label.clone(),
                    count: c.count,
                    a: rows_of(&c.a),
                    b: rows_of(&c.b),
                    g: rows_of(&c.g),
                    sigma: rows_of(&c.sigma),
                    gamma: rows_of(&c.gamma),
                    q: rows_of(&c.q),
                    r: rows_of(&c.r),
                    h: rows_of(&c.h),
                    init_mean: c.init_mean.iter().copied().collect(),
                    init_cov: rows_of(&c.init_cov),
                })
                .collect(),
            topology: RawTopology {
                e: rows_of(&spec.topology.comm_matrix()),
                m: rows_of(spec.topology.weights()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "horizon": 1.0, "steps": 10, "state_dim": 1, "control_dim": 1, "noise_dim": 1,
        "clusters": [{
            "label": "a", "count": 10,
            "A": [[0]], "B": [[1]], "G": [[0]], "Sigma": [[0]], "Gamma": [[0]],
            "Q": [[1]], "R": [[1]], "H": [[0]],
            "init_mean": [1], "init_cov": [[0]]
        }],
        "topology": { "E": [[1]], "M": [[1]] }
    }"#;

    fn two_cluster(gamma: f64) -> SystemSpec {
        let c1 = ScalarCluster {
            count: 2,
            g: 3.0,
            gamma,
            ..Default::default()
        };
        let c2 = ScalarCluster {
            count: 5,
            a: 0.5,
            g: -1.0,
            gamma,
            ..Default::default()
        };
        let topo = NetworkTopology::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.7, 1.3]),
        )
        .unwrap();
        SystemSpec::new(
            vec![c1.into_cluster("c1"), c2.into_cluster("c2")],
            topo,
            1.0,
            10,
        )
        .unwrap()
    }

    #[test]
    fn minimal_config_loads() {
        let spec = SystemSpec::from_json(MINIMAL).unwrap();
        assert_eq!(spec.k(), 1);
        assert_eq!(spec.total_agents(), 10);
        assert_eq!(spec.clusters[0].r[(0, 0)], 1.0);
        let again = SystemSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn zero_r_is_rejected() {
        let text = MINIMAL.replace(r#""R": [[1]]"#, r#""R": [[0]]"#);
        match SystemSpec::from_json(&text) {
            Err(Error::Validation { field, reason }) => {
                assert_eq!(field, "clusters[0].R");
                assert!(reason.contains("R not positive definite"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_comm_entry_is_rejected() {
        let text = MINIMAL.replace(r#""E": [[1]]"#, r#""E": [[2]]"#);
        match SystemSpec::from_json(&text) {
            Err(Error::Validation { field, .. }) => assert!(field.starts_with("topology.E")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_text_is_a_parse_error() {
        assert!(matches!(
            SystemSpec::from_json("{ not json"),
            Err(Error::Parse(_))
        ));
        let missing = MINIMAL.replace(r#""steps": 10,"#, "");
        assert!(matches!(SystemSpec::from_json(&missing), Err(Error::Parse(_))));
    }

    #[test]
    fn dimension_mismatch_names_field() {
        let text = MINIMAL.replace(r#""B": [[1]]"#, r#""B": [[1, 2]]"#);
        match SystemSpec::from_json(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "clusters[0].B"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_q_is_rejected() {
        let text = MINIMAL.replace(r#""Q": [[1]]"#, r#""Q": [[-1]]"#);
        assert!(matches!(
            SystemSpec::from_json(&text),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn coupling_without_channel_warns() {
        let spec = two_cluster(0.0);
        // M[0][1] = 0 so only M[1][0], which has a channel, is nonzero: no warning.
        assert!(spec.warnings().is_empty());
        let mut weights = spec.topology.weights().clone();
        weights[(0, 1)] = 0.4;
        let topo = NetworkTopology::new(spec.topology.comm_matrix(), weights).unwrap();
        let spec = SystemSpec::new(spec.clusters.clone(), topo, 1.0, 10).unwrap();
        let w = spec.warnings();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("M[0][1]"));
    }

    #[test]
    fn neighbor_sets() {
        let k = 3;
        let eye = NetworkTopology::new(DMatrix::identity(k, k), DMatrix::zeros(k, k)).unwrap();
        assert_eq!(eye.neighbor_set(0).unwrap(), vec![0]);
        let full = NetworkTopology::complete(DMatrix::zeros(k, k)).unwrap();
        assert_eq!(full.neighbor_set(1).unwrap(), vec![0, 1, 2]);
        let none = NetworkTopology::new(DMatrix::zeros(k, k), DMatrix::zeros(k, k)).unwrap();
        assert!(none.neighbor_set(2).unwrap().is_empty());
        assert!(matches!(
            neighbor_set(&none, 3),
            Err(Error::ClusterIndex { index: 3, .. })
        ));
    }

    #[test]
    fn single_cluster_gbar_is_g() {
        let c = ScalarCluster {
            count: 4,
            g: 2.5,
            ..Default::default()
        };
        let topo = NetworkTopology::complete(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let spec = SystemSpec::new(vec![c.into_cluster("c")], topo, 1.0, 4).unwrap();
        let d = derive_matrices(&spec);
        assert_eq!(d.gbar[0], DMatrix::from_element(1, 1, 2.5));
    }

    #[test]
    fn gbar_two_clusters_hand_expanded() {
        // (M_1 / K) ⊗ G_1 with M_1 = (2, 0), K = 2, G_1 = 3 -> (3, 0).
        let d = derive_matrices(&two_cluster(0.0));
        assert_eq!(d.gbar[0], DMatrix::from_row_slice(1, 2, &[3.0, 0.0]));
        assert_eq!(d.gbar[1], DMatrix::from_row_slice(1, 2, &[-0.35, -0.65]));
    }

    #[test]
    fn zero_gamma_kills_coupled_weights() {
        let d = derive_matrices(&two_cluster(0.0));
        assert_eq!(d.qbar_k, DMatrix::zeros(2, 2));
        assert_eq!(d.hbar_k, DMatrix::zeros(2, 2));
    }

    #[test]
    fn population_structure() {
        let spec = two_cluster(0.4);
        let d = derive_matrices(&spec);
        let pis = spec.population_weights();
        assert!((pis.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = spec.total_agents() as f64;
        assert_eq!(d.n_k, &d.pi_k * n);
        // D_q = N^K (column block q of G^K) / N_q.
        for q in 0..2 {
            let expect = &d.n_k * d.col_block(&d.g_k, q) / spec.clusters[q].count as f64;
            assert!((d.d(q) - expect).norm() < 1e-14);
        }
        for q in 0..2 {
            let sum = &d.observed_mask[q] + &d.unobserved_mask[q];
            assert!(sum.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn derive_is_pure() {
        let spec = two_cluster(0.3);
        assert_eq!(derive_matrices(&spec), derive_matrices(&spec));
    }

    #[test]
    fn common_scaling_leaves_coupled_weights_unchanged() {
        let spec = two_cluster(0.6);
        let base = derive_matrices(&spec);
        let scaled = derive_matrices(&spec.scaled(7).unwrap());
        assert!((&base.qbar_k - &scaled.qbar_k).amax() < 1e-14);
        assert!((&base.d_k - &scaled.d_k).amax() < 1e-14);
        assert!((&base.hbar_k - &scaled.hbar_k).amax() < 1e-14);
    }
}

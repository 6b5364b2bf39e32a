//! Linear-quadratic mean-field social control over a clustered network.
//!
//! Agents are partitioned into `K` clusters; each cluster shares its dynamics
//! and cost weights and is a node of a directed communication graph. The crate
//! computes the centralized optimal feedback from a pair of coupled backward
//! Riccati equations, simulates that controller and a distributed one that
//! replaces the global mean field by per-cluster estimates, and provides the
//! checks used to certify both: a brute-force stacked LQ oracle, a costate
//! residual checker, cost decompositions and convergence sweeps.
//!
//! Module map:
//!
//! - [`model`]: problem instance, JSON config, derived Kronecker matrices.
//! - [`riccati`]: backward RK4 solves for `P_q` and the coupled `K^K`.
//! - [`control`]: precomputed gain schedule and the feedback laws.
//! - [`simulate`]: counter-based noise and Euler–Maruyama simulation.
//! - [`estimator`]: cluster mean-field estimator and its error statistics.
//! - [`cost`]: social cost, two-part decomposition, value function.
//! - [`oracle`]: stacked finite-N LQ solution and costate residuals.
//! - [`cli`]: reproducible experiment commands and CSV output.

pub mod cli;
pub mod control;
pub mod cost;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{ClusterSpec, DerivedMatrices, NetworkTopology, SystemSpec};

//! Experiment runners shared by the commands, the tests and the browser demo.

use crate::cost::{social_cost, value_function, CostReport, Stat, ValueFunction};
use crate::error::{Error, Result};
use crate::estimator::{estimation_errors, path_error_samples, peak_error_step, EstimationErrors};
use crate::model::SystemSpec;
use crate::oracle::{
    compare_structured_vs_stacked, fbsde_residual, solve_stacked_riccati, stack_system,
    CompareTolerances, FbsdeResidual, OracleReport,
};
use crate::simulate::{draw_noise, simulate_centralized, simulate_coupled, CoupledRun, SimOptions, SolvedSystem};

use super::fit::{fit_loglog_slope, LogLogFit};

/// Both controllers on common noise, with their costs and the estimation error.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub run: CoupledRun,
    pub centralized: CostReport,
    pub distributed: CostReport,
    /// Paired `J_soc(distributed) - J_soc(centralized)`.
    pub gap: Stat,
    pub j1_gap: Stat,
    pub j2_gap: Stat,
    /// `|E J2(centralized) - E J2(distributed)| / E J2(centralized)`.
    pub j2_relative_difference: f64,
    pub errors: EstimationErrors,
    pub value: ValueFunction,
}

impl Comparison {
    pub fn gap_per_agent(&self, agents: usize) -> Stat {
        self.gap.scaled(1.0 / agents as f64)
    }
}

pub fn run_comparison(sys: &SolvedSystem, paths: usize, seed: u64, opts: SimOptions) -> Result<Comparison> {
    let noise = draw_noise(&sys.spec, paths, seed)?;
    let run = simulate_coupled(sys, &noise, opts)?;
    let centralized = social_cost(&run.centralized);
    let distributed = social_cost(&run.distributed);
    let pick = |r: &CostReport, f: fn(&crate::cost::PathCost) -> f64| -> Vec<f64> {
        r.per_path.iter().map(f).collect()
    };
    let gap = Stat::paired(&pick(&distributed, |c| c.social), &pick(&centralized, |c| c.social));
    let j1_gap = Stat::paired(&pick(&distributed, |c| c.j1), &pick(&centralized, |c| c.j1));
    let j2_gap = Stat::paired(&pick(&distributed, |c| c.j2), &pick(&centralized, |c| c.j2));
    let j2_relative_difference = if centralized.j2.mean == 0.0 {
        (distributed.j2.mean - centralized.j2.mean).abs()
    } else {
        (distributed.j2.mean - centralized.j2.mean).abs() / centralized.j2.mean.abs()
    };
    let errors = estimation_errors(&run.distributed, &run.estimator, Some(&run.centralized))?;
    let value = value_function(&sys.spec, &sys.derived, &sys.riccati)?;
    Ok(Comparison {
        run,
        centralized,
        distributed,
        gap,
        j1_gap,
        j2_gap,
        j2_relative_difference,
        errors,
        value,
    })
}

/// One population scale of a convergence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub scale: usize,
    /// Smallest cluster size.
    pub c1: usize,
    pub n: usize,
    pub seed: u64,
    pub paths: usize,
    pub gap_per_agent: Stat,
    /// `sup_t sum_q E|x_check^K - xbar^{K,q}|^2`, with the standard error at the peak.
    pub sup_error: Stat,
    pub sup_error_by_cluster: Vec<f64>,
    pub sup_hat_error: f64,
    pub sup_mean_field_sq: f64,
    pub sup_estimate_sq: f64,
    pub j2_relative_difference: f64,
    /// Largest relative change of any gain with respect to the first scale.
    pub gain_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub error_fit: LogLogFit,
    /// `None` when some gap estimate is not positive.
    pub gap_fit: Option<LogLogFit>,
}

fn gain_shift(base: &SolvedSystem, other: &SolvedSystem) -> f64 {
    let mut worst = 0.0_f64;
    for (fa, fb) in base
        .gains
        .own
        .iter()
        .flatten()
        .chain(base.gains.mean.iter().flatten())
        .zip(other.gains.own.iter().flatten().chain(other.gains.mean.iter().flatten()))
    {
        let scale = fa.amax().max(1e-300);
        worst = worst.max((fa - fb).amax() / scale);
    }
    worst
}

/// Runs the comparison at every scale (each `N_q` multiplied by the factor)
/// with common random numbers, then fits log-log slopes against `C_1`.
pub fn run_convergence(
    base: &SystemSpec,
    scales: &[usize],
    paths: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<ConvergenceStudy> {
    if scales.len() < 3 {
        return Err(Error::Argument(format!(
            "convergence needs at least 3 scales, got {}",
            scales.len()
        )));
    }
    if scales.contains(&0) {
        return Err(Error::Argument("scales must be positive".into()));
    }
    let opts = SimOptions {
        retain_agents: false,
        workers,
    };
    let mut rows = Vec::with_capacity(scales.len());
    let mut first: Option<SolvedSystem> = None;
    for &scale in scales {
        let sys = SolvedSystem::new(base.scaled(scale)?)?;
        let cmp = run_comparison(&sys, paths, seed, opts)?;
        let peak = peak_error_step(&cmp.errors);
        let samples = path_error_samples(&cmp.run.distributed, &cmp.run.estimator, peak);
        let shift = first.as_ref().map_or(0.0, |f| gain_shift(f, &sys));
        let n = sys.spec.total_agents();
        rows.push(ConvergenceRow {
            scale,
            c1: sys.spec.min_cluster_size(),
            n,
            seed,
            paths,
            gap_per_agent: cmp.gap_per_agent(n),
            sup_error: Stat {
                mean: cmp.errors.sup_check,
                std_error: Stat::from_samples(&samples).std_error,
            },
            sup_error_by_cluster: cmp.errors.sup_check_by_cluster.clone(),
            sup_hat_error: cmp.errors.sup_hat.unwrap_or(0.0),
            sup_mean_field_sq: cmp.errors.sup_mean_field_sq,
            sup_estimate_sq: cmp.errors.sup_estimate_sq,
            j2_relative_difference: cmp.j2_relative_difference,
            gain_shift: shift,
        });
        if first.is_none() {
            first = Some(sys);
        }
    }
    let error_fit = fit_loglog_slope(
        &rows
            .iter()
            .map(|r| (r.c1 as f64, r.sup_error.mean))
            .collect::<Vec<_>>(),
    )?;
    let gap_fit = fit_loglog_slope(
        &rows
            .iter()
            .map(|r| (r.c1 as f64, r.gap_per_agent.mean))
            .collect::<Vec<_>>(),
    )
    .ok();
    Ok(ConvergenceStudy {
        rows,
        error_fit,
        gap_fit,
    })
}

/// Tolerances of the oracle certification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTolerances {
    pub compare: CompareTolerances,
    /// Control-consistency and terminal residuals.
    pub exact: f64,
    /// Drift residual bound as a multiple of `h^2`.
    pub drift_factor: f64,
}

impl Default for OracleTolerances {
    fn default() -> Self {
        Self {
            compare: CompareTolerances::default(),
            exact: 1e-10,
            drift_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certification {
    pub report: OracleReport,
    pub residual: FbsdeResidual,
    pub stacked_value: f64,
    pub structured_value: ValueFunction,
}

/// Stacked-solution comparison plus costate residuals on simulated paths.
pub fn run_oracle(
    sys: &SolvedSystem,
    trials: usize,
    paths: usize,
    seed: u64,
    tol: OracleTolerances,
    workers: Option<usize>,
) -> Result<Certification> {
    let stacked = stack_system(&sys.spec, &sys.derived)?;
    let solution = solve_stacked_riccati(&stacked)?;
    let mut report = compare_structured_vs_stacked(
        &sys.spec,
        &sys.derived,
        &sys.riccati,
        &stacked,
        &solution,
        trials,
        seed,
        tol.compare,
    )?;
    let noise = draw_noise(&sys.spec, paths, seed)?;
    let bundle = simulate_centralized(
        sys,
        &noise,
        SimOptions {
            retain_agents: true,
            workers,
        },
    )?;
    let residual = fbsde_residual(&bundle, &sys.spec, &sys.derived, &sys.riccati)?;
    report
        .checks
        .extend(residual.report(tol.exact, tol.drift_factor).checks);
    Ok(Certification {
        report,
        residual,
        stacked_value: solution.value,
        structured_value: value_function(&sys.spec, &sys.derived, &sys.riccati)?,
    })
}

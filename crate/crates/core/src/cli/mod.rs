//! Reproducible experiment commands.
//!
//! Every command is a pure function of `(config, seed, paths, options)`; the
//! worker count changes only the schedule, never a byte of output.

pub mod commands;
pub mod experiments;
pub mod fit;
pub mod output;

pub use commands::{
    cmd_compare, cmd_converge, cmd_oracle, cmd_riccati, cmd_simulate, cmd_validate, load_spec,
    Outcome, RunOptions, SimulateRegime,
};
pub use experiments::{
    run_comparison, run_convergence, run_oracle, Certification, Comparison, ConvergenceRow,
    ConvergenceStudy, OracleTolerances,
};
pub use fit::{fit_loglog_slope, LogLogFit};

use crate::error::Error;

/// Process exit status for a command result: 0 success, 1 input or runtime
/// error, 2 a certification check failed.
pub fn exit_code(result: &Result<Outcome, Error>) -> i32 {
    match result {
        Ok(o) if o.pass => 0,
        Ok(_) => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let ok = Outcome {
            summary: String::new(),
            files: Vec::new(),
            pass: true,
        };
        let failed = Outcome {
            pass: false,
            ..ok.clone()
        };
        assert_eq!(exit_code(&Ok(ok)), 0);
        assert_eq!(exit_code(&Ok(failed)), 2);
        assert_eq!(exit_code(&Err(Error::MissingTrajectories)), 1);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfsocial::cli::{self, RunOptions, SimulateRegime};

#[derive(Parser)]
#[command(name = "mfsocial", version, about = "LQ mean-field social control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// System config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write per-agent trajectories and per-path estimation errors.
    #[arg(long)]
    dump_trajectories: bool,
    /// Replace the configured number of time steps.
    #[arg(long)]
    steps_override: Option<usize>,
    /// Worker threads (defaults to all cores); does not affect results.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            config: self.config.clone(),
            seed: self.seed,
            paths: self.paths,
            out: self.out.clone(),
            dump_trajectories: self.dump_trajectories,
            steps_override: self.steps_override,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Centralized,
    Distributed,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Load and check a config, printing a summary of derived quantities.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the Riccati equations and dump P, K and the gains.
    Riccati(Common),
    /// Simulate one or both controllers.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        regime: RegimeArg,
    },
    /// Compare centralized and distributed control on common noise.
    Compare(Common),
    /// Sweep population scales and fit convergence rates.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Comma-separated multipliers applied to every cluster size.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16, 64])]
        scales: Vec<usize>,
    },
    /// Certify the structured solution against the stacked one.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Random joint states per sampled grid node.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match &args.command {
        Command::Validate { config } => cli::cmd_validate(config),
        Command::Riccati(c) => cli::cmd_riccati(&c.options()),
        Command::Simulate { common, regime } => {
            let regime = match regime {
                RegimeArg::Centralized => SimulateRegime::Centralized,
                RegimeArg::Distributed => SimulateRegime::Distributed,
                RegimeArg::Both => SimulateRegime::Both,
            };
            cli::cmd_simulate(&common.options(), regime)
        }
        Command::Compare(c) => cli::cmd_compare(&c.options()),
        Command::Converge { common, scales } => cli::cmd_converge(&common.options(), scales),
        Command::Oracle { common, trials } => cli::cmd_oracle(&common.options(), *trials),
    };
    match &result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if !outcome.pass {
                eprintln!("one or more checks failed");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}

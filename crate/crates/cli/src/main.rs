mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CmdResult, Failure, EXIT_CONFIG};
use overrides::{env_overrides, load_scenario, load_scenario_str, FlagOverrides};

/// Learning-based tube MPC experiments.
#[derive(Parser, Debug)]
#[command(name = "lbmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonFlags {
    /// Run the trainer inline so traces are reproducible.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply the throttle square root to the mass flow instead of the pressure rise.
    #[arg(long)]
    root_on_massflow: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonFlags {
    fn overrides(&self) -> FlagOverrides {
        FlagOverrides { deterministic: self.deterministic, seed: self.seed, root_on_massflow: self.root_on_massflow }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one closed-loop scenario.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Run several scenarios from the same initial state and tabulate them.
    Compare {
        #[arg(required = true, num_args = 2..)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Tube margins, terminal set and invariance check for a scenario.
    Sets {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Time the QP solver and the controller, cold and warm started.
    Bench {
        /// QP sizes (number of decision variables).
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 20, 40])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Scenario for the controller row; the bundled DNN jet-engine scenario by default.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[command(flatten)]
        flags: CommonFlags,
    },
}

const BUNDLED_BENCH_SCENARIO: &str = include_str!("../../../scenarios/jet_engine_dnn.toml");

fn run(cli: Cli) -> CmdResult {
    let env = env_overrides(std::env::vars());
    match cli.command {
        Command::Simulate { scenario, flags } => {
            let s = load_scenario(&scenario, &env, &flags.overrides())?;
            commands::simulate(&s, &flags.out.unwrap_or_else(|| commands::default_out("simulate")))
        }
        Command::Compare { scenarios, flags } => {
            let list = scenarios
                .iter()
                .map(|p| load_scenario(p, &env, &flags.overrides()))
                .collect::<Result<Vec<_>, _>>()?;
            commands::compare_cmd(&list, &flags.out.unwrap_or_else(|| commands::default_out("compare")))
        }
        Command::Sets { scenario, flags } => {
            let s = load_scenario(&scenario, &env, &flags.overrides())?;
            commands::sets(&s, &flags.out.unwrap_or_else(|| commands::default_out("sets")))
        }
        Command::Bench { sizes, reps, scenario, flags } => {
            if reps == 0 || sizes.contains(&0) {
                return Err(Failure { code: EXIT_CONFIG, message: "--reps and --sizes must be >= 1".into() });
            }
            let s = match &scenario {
                Some(p) => load_scenario(p, &env, &flags.overrides())?,
                None => load_scenario_str(BUNDLED_BENCH_SCENARIO, &env, &flags.overrides())?,
            };
            let mut rows = commands::bench_qp(&sizes, reps, s.schedule.seed)?;
            rows.push(commands::bench_lbmpc(&s, reps)?);
            let csv = commands::bench_csv(&rows);
            match flags.out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .and_then(|()| std::fs::write(dir.join("bench.csv"), &csv))
                        .map_err(|e| Failure { code: commands::EXIT_NUMERICAL, message: e.to_string() })?;
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

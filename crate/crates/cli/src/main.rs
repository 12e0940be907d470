use std::path::PathBuf;
use std::process::ExitCode;

use bodyschema_cli::commands::{self, regress::RegressPreset, Outcome};
use bodyschema_cli::error::CliResult;
use bodyschema_cli::experiment::{Experiment, Protocol};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bodyschema",
    version,
    about = "Virtual joint regression, gradient MPC and dynamics baselines"
)]
struct Cli {
    /// Experiment TOML; the built-in simulation preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate inputs and print the planned work without running it.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate keypoint observations and sine-motion dynamics data.
    GenData {
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
    },
    /// Regress virtual joint offsets from a dataset, or run a recovery preset.
    Regress {
        /// Observation CSV written by `gen-data`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Used when no dataset is given.
        #[arg(long, value_enum, default_value = "gt-recovery")]
        preset: RegressPreset,
    },
    /// Placing tasks with the kinematic planner.
    Mpc {
        /// Also plan with the trained baselines from `<out>/models`.
        #[arg(long)]
        baselines: bool,
    },
    /// Train the four MLP dynamics baselines.
    TrainDyn,
    /// Long-horizon prediction error of the kinematic model and the baselines.
    EvalHorizon,
    /// Aggregate result files into table.csv and report.md.
    Report {
        /// Directory holding the result files; defaults to the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<Outcome> {
    let exp = Experiment::load(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    let dry = cli.dry_run;
    match cli.command {
        Command::GenData { protocol } => commands::gen_data::run(&exp, protocol, dry),
        Command::Regress { dataset, preset } => commands::regress::run(&exp, dataset.as_deref(), preset, dry),
        Command::Mpc { baselines } => commands::mpc::run(&exp, baselines, dry),
        Command::TrainDyn => commands::train_dyn::run(&exp, dry),
        Command::EvalHorizon => commands::eval_horizon::run(&exp, dry),
        Command::Report { input } => commands::report::run(&exp, input.as_deref(), dry),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `hetpd`: plan, simulate, sweep, compare, explain and validate
//! P/D-disaggregated deployments from the command line.
//!
//! Exit codes: 0 success, 2 infeasible plan, 3 input error, 4 internal
//! invariant breach.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_INPUT, error: error.into() }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_INTERNAL, error: error.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    #[value(name = "jsonl")]
    JsonLines,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Table => "txt",
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hetpd", version, about = "Capacity planner and simulator for P/D-disaggregated LLM serving")]
pub struct Cli {
    /// Directory for written artifacts.
    #[arg(long, global = true, env = "HETPD_OUTPUT_DIR", default_value = "hetpd-out")]
    pub output_dir: PathBuf,
    /// Format of tabular output on stdout and in written tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search strategies and P:D counts; writes plan.json and the explain report.
    Plan(PlanArgs),
    /// Print the per-strategy evaluation behind a plan without writing plan.json.
    Explain(PlanArgs),
    /// Simulate a scenario's own configuration.
    Simulate(SimulateArgs),
    /// Simulate every point of a scenario's sweep axes.
    Sweep(SweepArgs),
    /// Run each sweep point disaggregated and colocated and report the deltas.
    Compare(SweepArgs),
    /// Check a catalog, scenarios and plans without running anything.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub workload: String,
    /// GPU for prefill; with --decode-gpu fixes the roles.
    #[arg(long, requires = "decode_gpu")]
    pub prefill_gpu: Option<String>,
    #[arg(long, requires = "prefill_gpu")]
    pub decode_gpu: Option<String>,
    /// TOML file with tp_choices, pp_choices, dp_choices, ep_choices and
    /// max_gpus_per_instance.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Maximum prefill GPUs.
    #[arg(long)]
    pub gpu_budget: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's catalog path.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Builds the cluster from a plan file instead of the scenario's pools.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes trace.jsonl even if the scenario does not ask for it.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub scenario: Vec<PathBuf>,
    /// Plans to re-check against the catalog given with --catalog.
    #[arg(long, num_args = 1..)]
    pub plan: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

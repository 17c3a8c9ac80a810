//! `wvar`: command-line front end.
//!
//! Exit status: 0 when every check passes, 2 when a check fails, 1 on
//! runtime errors, 64 on invalid flags and 66 when an input file is missing.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "wvar",
    version,
    about = "Variations of measures on the torus and leader-follower control experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalOpts {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; WVAR_THREADS takes precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Directory for reports and plot data.
    #[arg(long, global = true, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact optimal transport between two measures.
    Ot(OtArgs),
    /// Admissibility of a variation family.
    Vary(VaryArgs),
    /// Derivative residual of a functional along a random family.
    Deriv(DerivArgs),
    /// Solve the leader-follower system.
    Simulate(SimulateArgs),
    /// Value function of a builtin control problem.
    Value(ValueArgs),
    /// Viscosity and comparison checks.
    HjbCheck(HjbArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Map,
    Flat,
    Lagrangian,
    Eulerian,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OtArgs {
    #[arg(long)]
    pub mu: PathBuf,
    #[arg(long)]
    pub nu: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub q: f64,
    /// Also write the plan on its own.
    #[arg(long)]
    #[serde(skip)]
    pub emit_plan: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VaryArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Base measure; random when absent.
    #[arg(long)]
    pub mu: Option<PathBuf>,
    /// Flat families: target measure; random when absent.
    #[arg(long)]
    pub nu: Option<PathBuf>,
    /// Map and Eulerian families: velocity field (zero, constant:<v>, dilation, shear, swirl).
    #[arg(long, default_value = "swirl")]
    pub field: String,
    #[arg(long, default_value_t = 8)]
    pub atoms: usize,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 2.0)]
    pub q: f64,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 20)]
    pub levels: usize,
    /// Time grid `geometric:<T>:<k>`, i.e. `T 2^-1, ..., T 2^-k`; defaults to the horizon and `--levels`.
    #[arg(long)]
    pub tgrid: Option<String>,
    /// Integration steps for Eulerian families.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DerivArgs {
    #[arg(long)]
    pub functional: String,
    #[arg(long, value_enum)]
    pub family_kind: KindArg,
    #[arg(long)]
    pub mu: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub atoms: usize,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Defaults to 1 for flat families and 2 otherwise.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub levels: usize,
    /// Final residual below which the candidate is accepted.
    #[arg(long, default_value_t = 1e-6)]
    pub abs_tol: f64,
    /// Log-log residual slope that also counts as convergence.
    #[arg(long, default_value_t = 0.9)]
    pub min_slope: f64,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long = "dyn", default_value = "chase")]
    pub dynamics: String,
    /// Leader start, comma separated.
    #[arg(long, default_value = "0.5", allow_hyphen_values = true)]
    pub leader_x: String,
    #[arg(long)]
    pub mu: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub atoms: usize,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    pub u0: String,
    /// constant:<v> or field:<zero|center|outward>.
    #[arg(long, default_value = "constant:0", allow_hyphen_values = true)]
    pub ubar: String,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValueArgs {
    #[arg(long, default_value = "reach")]
    pub instance: String,
    /// Leader controls per axis.
    #[arg(long, default_value_t = 9)]
    pub levels: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write the value table over probe times and states.
    #[arg(long)]
    #[serde(skip)]
    pub emit_table: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub table_times: usize,
    #[arg(long, default_value_t = 11)]
    pub table_states: usize,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HjbMode {
    Sub,
    Super,
    Compare,
    Doubling,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HjbArgs {
    #[arg(long, value_enum)]
    pub mode: HjbMode,
    #[arg(long, default_value = "reach")]
    pub instance: String,
    #[arg(long, default_value_t = 9)]
    pub levels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Random probe pairs for `compare`.
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 5)]
    pub table_times: usize,
    #[arg(long, default_value_t = 11)]
    pub table_states: usize,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

fn init_threads(opt: Option<usize>) -> Result<(), String> {
    let n = match std::env::var("WVAR_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("WVAR_THREADS must be a count, got `{v}`"))?,
        ),
        Err(_) => opt,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(64)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = init_threads(cli.global.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(64);
    }
    if let Err(e) = std::fs::create_dir_all(&cli.global.out_dir) {
        eprintln!("error: cannot create {}: {e}", cli.global.out_dir.display());
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code_for(&e))
        }
    }
}
